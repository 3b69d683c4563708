"""Velocity safety filter from signed-distance barrier constraints."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import DistanceResult
from .kinematics import ContractViolation, RobotModel, jacobian_at, link_frames
from .qp import QpError, solve_qp
from .scene import PairQuery, PlanningScene, nearest_pairs

__all__ = [
    "CbfParams",
    "LinearConstraint",
    "QpDiagnostics",
    "StepResult",
    "build_constraint",
    "cbf_step",
    "filter_velocity",
]

# Weight on the velocity error when minimizing constraint violation of an
# infeasible filter problem.
_ELASTIC_WEIGHT = 1e-6


@dataclass(frozen=True)
class CbfParams:
    """Filter parameters.

    ``margin_mode`` is ``"global"`` (use ``j_max``) or ``"local"`` (use the
    Jacobian norm at the witness points).
    """

    alpha: float = 5.0
    q_dot_max: float = 1.0
    robust_margin: bool = True
    j_max: Optional[float] = None
    max_pairs: int = 10
    margin_mode: str = "global"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ContractViolation("alpha must be positive")
        if not self.q_dot_max > 0:
            raise ContractViolation("q_dot_max must be positive")
        if self.max_pairs < 1:
            raise ContractViolation("max_pairs must be >= 1")
        if self.margin_mode not in ("global", "local"):
            raise ContractViolation(f"unknown margin mode {self.margin_mode!r}")
        if self.robust_margin and self.margin_mode == "global" and not (self.j_max or 0) > 0:
            raise ContractViolation("robust margin needs j_max > 0")

    @classmethod
    def from_json(cls, data: dict, j_max: Optional[float] = None) -> "CbfParams":
        return cls(
            alpha=float(data.get("alpha", 5.0)),
            q_dot_max=float(data.get("q_dot_max", 1.0)),
            robust_margin=bool(data.get("robust_margin", True)),
            j_max=data.get("j_max", j_max),
            max_pairs=int(data.get("max_pairs", 10)),
            margin_mode=data.get("margin_mode", "global"),
        )

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "q_dot_max": self.q_dot_max,
            "robust_margin": self.robust_margin,
            "j_max": self.j_max,
            "max_pairs": self.max_pairs,
            "margin_mode": self.margin_mode,
        }


@dataclass(frozen=True, eq=False)
class LinearConstraint:
    """``a @ v >= b``."""

    a: np.ndarray
    b: float
    pair: PairQuery


@dataclass
class QpDiagnostics:
    status: str  # "optimal", "unconstrained", "infeasible", "failed"
    feasible: bool
    active_constraints: list = field(default_factory=list)
    active_bounds: list = field(default_factory=list)
    slack: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


def build_constraint(
    result: DistanceResult, model: RobotModel, q, params: CbfParams, frames=None
) -> LinearConstraint:
    """Linearized barrier condition for one pair.

    Environment pair: ``n' J_A v >= -alpha h + 2 J_max q_dot_max``.
    Self pair: ``n' (J_A - J_B) v >= -alpha h + 4 J_max q_dot_max``.
    """
    q = model.check_q(q)
    if frames is None:
        frames = link_frames(model, q)
    link_a, link_b = result.links
    if link_a is None:
        raise ContractViolation("distance result has no robot link on side A")
    n_hat = np.asarray(result.normal, dtype=float)
    J_a = jacobian_at(model, frames, link_a, result.point_a)
    if link_b is None:
        a = n_hat @ J_a
        kind = "environment"
    else:
        J_b = jacobian_at(model, frames, link_b, result.point_b)
        a = n_hat @ (J_a - J_b)
        kind = "self"
    b = -params.alpha * result.signed_distance
    if params.robust_margin:
        if params.margin_mode == "global":
            factor = 2.0 if kind == "environment" else 4.0
            b += factor * params.j_max * params.q_dot_max
        else:
            local = np.linalg.norm(J_a, 2)
            if kind == "self":
                local += np.linalg.norm(J_b, 2)
            b += 2.0 * local * params.q_dot_max
    return LinearConstraint(a, float(b), PairQuery(kind, *result.pair))


def filter_velocity(
    v_des, constraints: Sequence[LinearConstraint], params: CbfParams
) -> tuple[np.ndarray, QpDiagnostics]:
    """Closest velocity to ``v_des`` satisfying all constraints and ``|v_j| <= q_dot_max``.

    If the constraints conflict, the returned velocity minimizes the squared
    constraint violation within the box and ``diagnostics.feasible`` is False;
    callers must then stop the robot.  Raises :class:`~cbftraj.qp.QpError`
    (with a zero ``fallback``) when the active-set iteration fails.
    """
    v_des = np.asarray(v_des, dtype=float)
    n = v_des.shape[0]
    m = len(constraints)
    if any(np.shape(c.a) != (n,) for c in constraints):
        raise ContractViolation("constraint dimension does not match v_des")
    A = np.array([c.a for c in constraints], dtype=float).reshape(m, n)
    b = np.array([c.b for c in constraints], dtype=float)
    vmax = params.q_dot_max
    eye = np.eye(n)
    C = np.vstack([A, eye, -eye])
    d = np.concatenate([b, -vmax * np.ones(n), -vmax * np.ones(n)])

    res = solve_qp(eye, -v_des, C, d)
    if res.feasible:
        v = res.x
        status = "optimal" if m else "unconstrained"
    else:
        # Elastic problem over (v, s): min |s|^2 + w |v - v_des|^2,
        # s.t. A v + s >= b and the velocity box.
        G = np.diag(np.concatenate([_ELASTIC_WEIGHT * np.ones(n), np.ones(m)]))
        g = np.concatenate([-_ELASTIC_WEIGHT * v_des, np.zeros(m)])
        Cz = np.vstack(
            [
                np.hstack([A, np.eye(m)]),
                np.hstack([eye, np.zeros((n, m))]),
                np.hstack([-eye, np.zeros((n, m))]),
            ]
        )
        el = solve_qp(G, g, Cz, d)
        v = el.x[:n]
        status = "infeasible"
    slack = A @ v - b
    active_c = [i for i in res.active if i < m]
    active_b = sorted({i - m if i < m + n else i - m - n for i in res.active if i >= m})
    diag = QpDiagnostics(status, res.feasible, active_c, active_b, slack, res.iterations)
    return v, diag


@dataclass
class StepResult:
    q_next: np.ndarray
    v_star: np.ndarray
    h_min: float
    diagnostics: QpDiagnostics
    nearest: Optional[DistanceResult] = None
    constraints: list = field(default_factory=list)


def cbf_step(
    model: RobotModel,
    scene: PlanningScene,
    q,
    v_des,
    params: CbfParams,
    dt: float,
) -> StepResult:
    """Filter ``v_des`` at ``q`` and take one explicit Euler step of length ``dt``.

    On an infeasible or failed filter problem the robot holds position.
    """
    if not dt > 0:
        raise ContractViolation("dt must be positive")
    q = model.check_q(q)
    v_des = np.asarray(v_des, dtype=float)
    if v_des.shape != q.shape:
        raise ContractViolation("v_des dimension does not match q")
    frames = link_frames(model, q)
    h_min, results = nearest_pairs(scene, model, q, params.max_pairs, frames)
    nearest = results[0] if results else None
    hold = np.zeros_like(q)
    if not math.isfinite(h_min) and results:
        diag = QpDiagnostics("failed", False)
        return StepResult(q.copy(), hold, h_min, diag, nearest)
    constraints = [build_constraint(r, model, q, params, frames) for r in results]
    try:
        v_star, diag = filter_velocity(v_des, constraints, params)
    except QpError as exc:
        diag = QpDiagnostics("failed", False)
        return StepResult(q.copy(), exc.fallback, h_min, diag, nearest, constraints)
    if not diag.feasible:
        return StepResult(q.copy(), hold, h_min, diag, nearest, constraints)
    return StepResult(q + dt * v_star, v_star, h_min, diag, nearest, constraints)
