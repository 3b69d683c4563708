"""Closed-loop checks: kinematic rollouts, a velocity-tracking plant, and probes.

The plant does not model rigid-body dynamics.  It only realizes a velocity
error ``e_dot = q_dot - v*`` that decays exponentially, which is all the
safety argument for the full-order system needs:

* ``first_order_error``: ``e_dot(t) = exp(-lam t) e_dot0`` exactly (``M = 1``);
* ``double_integrator_p``: ``q_ddot = -lam (q_dot - v*)``.  The error jumps
  whenever the filtered command changes, so the envelope is re-anchored and
  the certificate uses ``max_k ||e_dot_k+|| exp(lam t_k)`` as ``||e_dot0||``.

With the filter's gradient bound ``c_h``, a start in
``S_M = {h(q) - c_h M ||e_dot|| / (lam - alpha) >= 0}`` keeps ``h`` above the
comparison function returned by :func:`comparison_bound`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cbf import CbfParams, build_constraint, cbf_step
from .kinematics import ContractViolation, RobotModel, link_frames
from .scene import PlanningScene, min_signed_distance
from .tracker import (
    RolloutResult,
    SceneEvent,
    Trace,
    TrackerParams,
    TrackerState,
    Trajectory,
    apply_event,
    desired_velocity,
    run_filtered_tracking,
)

__all__ = [
    "DynamicRollout",
    "ProbeStats",
    "SafetyCertificate",
    "TrackingPlant",
    "comparison_bound",
    "gradient_disturbance_probe",
    "invariance_report",
    "rollout_dynamic",
    "rollout_kinematic",
]

INVARIANCE_TOL = 1e-4


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrackingPlant:
    lam: float
    m_const: float = 1.0
    mode: str = "first_order_error"

    def __post_init__(self):
        if not self.lam > 0:
            raise ContractViolation("plant rate must be positive")
        if self.m_const < 1.0:
            raise ContractViolation("overshoot constant M must be >= 1")
        if self.mode not in ("first_order_error", "double_integrator_p"):
            raise ContractViolation(f"unknown plant mode {self.mode!r}")

    def to_json(self) -> dict:
        return {"lambda": self.lam, "m_const": self.m_const, "mode": self.mode}

    @classmethod
    def from_json(cls, data: dict) -> "TrackingPlant":
        return cls(float(data["lambda"]), float(data.get("m_const", 1.0)), data.get("mode", "first_order_error"))


def comparison_bound(t, h0: float, alpha: float, lam: float, c_h: float, m_const: float, e0_norm: float):
    """``y(t) = (h0 - C) exp(-alpha t) + C exp(-lam t)``, ``C = c_h M |e0| / (lam - alpha)``.

    Solves ``y' = -alpha y - c_h M |e0| exp(-lam t)`` with ``y(0) = h0``.
    """
    if not lam > alpha:
        raise ConfigurationError("comparison bound needs lam > alpha")
    t = np.asarray(t, dtype=float)
    c = c_h * m_const * e0_norm / (lam - alpha)
    return (h0 - c) * np.exp(-alpha * t) + c * np.exp(-lam * t)


@dataclass
class SafetyCertificate:
    c_h: float
    margin: float
    s_m_member: bool
    min_h_observed: float
    h0: float = 0.0
    alpha: float = 0.0
    lam: float = 0.0
    m_const: float = 1.0
    e0_norm: float = 0.0
    worst_gap: float = math.inf  # min over samples of h - y
    holds: Optional[bool] = None  # None when not in S_M (nothing is claimed)

    def to_json(self) -> dict:
        return {
            "c_h": self.c_h,
            "margin": self.margin,
            "s_m_member": self.s_m_member,
            "min_h_observed": self.min_h_observed,
            "h0": self.h0,
            "alpha": self.alpha,
            "lambda": self.lam,
            "m_const": self.m_const,
            "e0_norm": self.e0_norm,
            "worst_gap": self.worst_gap,
            "holds": self.holds,
        }


def invariance_report(trace: Trace, toggle_steps: Sequence[int] = (), tol: float = INVARIANCE_TOL) -> dict:
    """Minimum ``h`` over the trace with scene-toggle rows reported separately."""
    h = trace.h
    toggles = sorted(set(toggle_steps))
    mask = np.ones(len(h), dtype=bool)
    mask[toggles] = False
    h0 = float(h[0]) if len(h) else math.inf
    min_h = float(h[mask].min()) if mask.any() else math.inf
    applies = h0 >= 0.0
    return {
        "h0": h0,
        "min_h": min_h,
        "toggle_steps": toggles,
        "toggle_h": [float(h[k]) for k in toggles],
        "applies": applies,
        "held": (min_h >= -tol) if applies else None,
        "tolerance": tol,
    }


def rollout_kinematic(
    model: RobotModel,
    scene: PlanningScene,
    traj: Trajectory,
    q0,
    cbf_params: CbfParams,
    tracker_params: TrackerParams,
    dt: float,
    t_max: float,
    events: Sequence[SceneEvent] = (),
    step_times: Optional[list] = None,
) -> RolloutResult:
    """Rollout of ``q_dot = v*``; see :func:`cbftraj.tracker.run_filtered_tracking`."""
    return run_filtered_tracking(
        model, scene, traj, q0, cbf_params, tracker_params, dt, t_max, events, step_times=step_times
    )


@dataclass
class DynamicRollout:
    trace: Trace
    q_dot: list = field(default_factory=list)
    error_norm: list = field(default_factory=list)  # ||q_dot - v*|| at the start of each step
    converged: bool = False
    toggle_steps: list = field(default_factory=list)
    e0_effective: float = 0.0


def rollout_dynamic(
    model: RobotModel,
    scene: PlanningScene,
    traj: Trajectory,
    q0,
    qdot0,
    plant: TrackingPlant,
    cbf_params: CbfParams,
    tracker_params: TrackerParams,
    dt: float,
    t_max: float,
    c_h: Optional[float] = None,
    events: Sequence[SceneEvent] = (),
    certify: bool = True,
) -> tuple[DynamicRollout, Optional[SafetyCertificate]]:
    """Roll out the filtered tracker through the velocity-tracking plant.

    The plant is integrated in closed form over each step (the command ``v*``
    is held constant).  ``c_h`` defaults to ``cbf_params.j_max``.  With
    ``certify`` the returned certificate compares ``h`` at every sample with
    the comparison function.
    """
    if certify and not plant.lam > cbf_params.alpha:
        raise ConfigurationError(f"plant rate {plant.lam} must exceed alpha {cbf_params.alpha}")
    if c_h is None:
        c_h = cbf_params.j_max
    q = model.check_q(q0).copy()
    q_dot = np.asarray(qdot0, dtype=float).copy()
    if q_dot.shape != q.shape:
        raise ContractViolation("qdot0 dimension does not match q0")
    if traj.n != model.n:
        raise ContractViolation("trajectory dimension does not match the robot")
    lam = plant.lam
    decay = math.exp(-lam * dt)
    gain = (1.0 - decay) / lam
    v_sat = tracker_params.v_sat if tracker_params.v_sat is not None else model.velocity_limits
    state = TrackerState(tracker_params)
    pending = sorted(events, key=lambda e: e.time)
    out = DynamicRollout(Trace())
    steps = int(math.floor(t_max / dt + 1e-9))
    e_first = None  # first_order_error: the fixed initial error
    e0_eff = 0.0
    log_e0 = -math.inf
    k = 0
    while True:
        t = k * dt
        labels = []
        while pending and pending[0].time <= t + 1e-12:
            ev = pending.pop(0)
            scene = apply_event(scene, ev)
            labels.append(ev.label)
        if labels:
            out.toggle_steps.append(k)
        v_des, state = desired_velocity(state, traj, q, dt if k else 0.0, v_sat)
        at_goal = state.index == len(traj) - 1 and np.linalg.norm(traj.goal - q) < tracker_params.epsilon
        if at_goal or k >= steps:
            h, results = min_signed_distance(scene, model, q)
            pair = "" if not results else f"{results[0].pair[0]}|{results[0].pair[1]}"
            out.trace.append(t, q, q_dot, h, pair, "final", ";".join(labels))
            out.q_dot.append(q_dot.copy())
            out.error_norm.append(math.nan)
            out.converged = bool(at_goal)
            break
        step = cbf_step(model, scene, q, v_des, cbf_params, dt)
        v_star = step.v_star
        if plant.mode == "first_order_error":
            if e_first is None:
                e_first = q_dot - v_star
                e0_eff = float(np.linalg.norm(e_first))
            e_k = e_first * math.exp(-lam * t)
        else:
            e_k = q_dot - v_star
            norm = float(np.linalg.norm(e_k))
            if norm > 0.0:
                # Re-anchored envelope; computed in logs because exp(lam t) overflows.
                log_e0 = max(log_e0, math.log(norm) + lam * t)
        q_dot = v_star + e_k
        pair = "" if step.nearest is None else f"{step.nearest.pair[0]}|{step.nearest.pair[1]}"
        out.trace.append(t, q, v_star, step.h_min, pair, step.diagnostics.status, ";".join(labels))
        out.q_dot.append(q_dot.copy())
        out.error_norm.append(float(np.linalg.norm(e_k)))
        q = q + dt * v_star + gain * e_k
        q_dot = v_star + decay * e_k
        k += 1
    if plant.mode == "double_integrator_p":
        e0_eff = math.exp(log_e0) if log_e0 < 700.0 else math.inf
    out.e0_effective = e0_eff
    if not certify:
        return out, None
    return out, certify_rollout(out, cbf_params.alpha, plant, c_h)


def certify_rollout(out: DynamicRollout, alpha: float, plant: TrackingPlant, c_h: float) -> SafetyCertificate:
    h = out.trace.h
    t = np.array(out.trace.t)
    h0 = float(h[0])
    e0 = out.e0_effective
    margin = c_h * plant.m_const * e0 / (plant.lam - alpha)
    member = h0 - margin >= 0.0
    keep = np.ones(len(h), dtype=bool)
    keep[out.toggle_steps] = False
    if math.isfinite(e0):
        y = comparison_bound(t, h0, alpha, plant.lam, c_h, plant.m_const, e0)
        gap = float((h - y)[keep].min())
    else:
        gap = math.nan
    return SafetyCertificate(
        c_h=c_h,
        margin=margin,
        s_m_member=bool(member),
        min_h_observed=float(h[keep].min()),
        h0=h0,
        alpha=alpha,
        lam=plant.lam,
        m_const=plant.m_const,
        e0_norm=e0,
        worst_gap=gap,
        holds=(gap >= -INVARIANCE_TOL) if member else None,
    )


@dataclass
class ProbeStats:
    grad_norms: np.ndarray
    delta_norms: np.ndarray
    j_max: float
    kinds: list

    @property
    def max_grad(self) -> float:
        return float(self.grad_norms.max(initial=0.0))

    @property
    def max_delta(self) -> float:
        return float(self.delta_norms.max(initial=0.0))

    @property
    def grad_bound_ok(self) -> bool:
        return self.max_grad <= self.j_max + 1e-6

    @property
    def delta_bound_ok(self) -> bool:
        return self.max_delta <= 2.0 * self.j_max


def gradient_disturbance_probe(
    model: RobotModel, scene: PlanningScene, q_samples, j_max: float, step: float = 1e-6
) -> ProbeStats:
    """Compare central differences of ``h`` with the witness-based gradient.

    For each sample, ``grad`` is the central-difference gradient of
    ``min_signed_distance`` and ``delta = grad - n' J_A`` (``n' (J_A - J_B)``
    for a self pair) at the nearest pair.
    """
    grads, deltas, kinds = [], [], []
    for q in np.atleast_2d(np.asarray(q_samples, dtype=float)):
        frames = link_frames(model, q)
        h, results = min_signed_distance(scene, model, q, frames)
        if not results:
            continue
        g = np.empty(model.n)
        for j in range(model.n):
            dq = np.zeros(model.n)
            dq[j] = step
            hp, _ = min_signed_distance(scene, model, q + dq)
            hm, _ = min_signed_distance(scene, model, q - dq)
            g[j] = (hp - hm) / (2.0 * step)
        r = results[0]
        params = CbfParams(robust_margin=False)
        a = build_constraint(r, model, q, params, frames).a
        grads.append(float(np.linalg.norm(g)))
        deltas.append(float(np.linalg.norm(g - a)))
        kinds.append(r.kind)
    return ProbeStats(np.array(grads), np.array(deltas), float(j_max), kinds)
