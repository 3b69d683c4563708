"""Serial-chain forward kinematics and point Jacobians."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose, Shape, axis_angle_matrix, shape_from_json

__all__ = [
    "ContractViolation",
    "Joint",
    "JointState",
    "LinkGeometry",
    "RobotModel",
    "forward_kinematics",
    "jacobian_norm_bound",
    "link_frames",
    "point_jacobian",
]

DEFAULT_JMAX_FACTOR = 1.25


class ContractViolation(ValueError):
    """Input violates a documented precondition (e.g. wrong dimension)."""


@dataclass(frozen=True, eq=False)
class Joint:
    """Joint ``i`` moves link ``i``; ``origin`` is relative to link ``i-1``."""

    type: str
    axis: np.ndarray
    origin: Pose = field(default_factory=Pose)
    lower: float = -np.pi
    upper: float = np.pi
    velocity: float = 1.0

    def __post_init__(self):
        if self.type not in ("revolute", "prismatic"):
            raise ContractViolation(f"unsupported joint type {self.type!r}")
        axis = np.array(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ContractViolation("joint axis must have unit norm")
        if not self.velocity > 0:
            raise ContractViolation("joint velocity bound must be positive")
        if not self.lower <= self.upper:
            raise ContractViolation("joint lower limit exceeds upper limit")
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)

    def __eq__(self, other):
        return (
            isinstance(other, Joint)
            and self.type == other.type
            and np.array_equal(self.axis, other.axis)
            and self.origin == other.origin
            and (self.lower, self.upper, self.velocity)
            == (other.lower, other.upper, other.velocity)
        )

    def motion(self, value: float) -> Pose:
        if self.type == "revolute":
            return Pose(axis_angle_matrix(self.axis, value), np.zeros(3))
        return Pose(np.eye(3), self.axis * value)


@dataclass(frozen=True)
class LinkGeometry:
    link: int
    shape: Shape
    origin: Pose = field(default_factory=Pose)
    name: str = ""


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    q_dot: Optional[np.ndarray] = None

    @classmethod
    def from_json(cls, data: dict) -> "JointState":
        qd = data.get("q_dot")
        return cls(np.asarray(data["q"], dtype=float), None if qd is None else np.asarray(qd, dtype=float))

    def to_json(self) -> dict:
        out = {"q": np.asarray(self.q).tolist()}
        if self.q_dot is not None:
            out["q_dot"] = np.asarray(self.q_dot).tolist()
        return out


class RobotModel:
    """Serial chain of revolute/prismatic joints with attached convex geometry.

    ``tip`` is a point in the last link frame used as the reference point for
    :func:`jacobian_norm_bound`.
    """

    def __init__(
        self,
        joints: Sequence[Joint],
        geometry: Sequence[LinkGeometry] = (),
        tip=(0.0, 0.0, 0.0),
    ):
        if not joints:
            raise ContractViolation("robot needs at least one joint")
        self.joints = tuple(joints)
        geoms = []
        for k, g in enumerate(geometry):
            if not 0 <= g.link < len(self.joints):
                raise ContractViolation(f"geometry {k} attached to unknown link {g.link}")
            name = g.name or f"link{g.link}_{k}"
            geoms.append(LinkGeometry(g.link, g.shape, g.origin, name))
        names = [g.name for g in geoms]
        if len(set(names)) != len(names):
            raise ContractViolation("geometry names must be unique")
        self.geometry = tuple(geoms)
        self.tip = np.array(tip, dtype=float).reshape(3)
        self.lower = np.array([j.lower for j in self.joints])
        self.upper = np.array([j.upper for j in self.joints])
        self.velocity_limits = np.array([j.velocity for j in self.joints])
        self._origins = [(j.origin.rotation, j.origin.translation) for j in self.joints]
        self._revolute = [j.type == "revolute" for j in self.joints]

    @property
    def n(self) -> int:
        return len(self.joints)

    def check_q(self, q) -> np.ndarray:
        q = np.asarray(getattr(q, "q", q), dtype=float)
        if q.shape != (self.n,):
            raise ContractViolation(f"expected {self.n} joint values, got shape {q.shape}")
        return q

    def within_limits(self, q, slack: float = 0.0) -> bool:
        q = self.check_q(q)
        return bool(np.all(q >= self.lower - slack) and np.all(q <= self.upper + slack))

    def __eq__(self, other):
        return (
            isinstance(other, RobotModel)
            and self.joints == other.joints
            and self.geometry == other.geometry
            and np.array_equal(self.tip, other.tip)
        )

    # -- JSON ---------------------------------------------------------------

    @classmethod
    def from_json(cls, data: dict) -> "RobotModel":
        joints = []
        for i, jd in enumerate(data["joints"]):
            lim = jd.get("limits", {})
            try:
                joints.append(
                    Joint(
                        jd.get("type", "revolute"),
                        jd["axis"],
                        Pose.from_json(jd.get("origin")),
                        float(lim.get("lower", -np.pi)),
                        float(lim.get("upper", np.pi)),
                        float(lim.get("velocity", 1.0)),
                    )
                )
            except KeyError as exc:
                raise ContractViolation(f"joint {i}: missing field {exc}") from None
        geometry = [
            LinkGeometry(
                int(g["link"]),
                shape_from_json(g["shape"]),
                Pose.from_json(g.get("origin")),
                g.get("name", ""),
            )
            for g in data.get("geometry", [])
        ]
        return cls(joints, geometry, data.get("tip", (0.0, 0.0, 0.0)))

    def to_json(self) -> dict:
        return {
            "joints": [
                {
                    "type": j.type,
                    "axis": j.axis.tolist(),
                    "origin": j.origin.to_json(),
                    "limits": {"lower": j.lower, "upper": j.upper, "velocity": j.velocity},
                }
                for j in self.joints
            ],
            "geometry": [
                {"link": g.link, "name": g.name, "shape": g.shape.to_json(), "origin": g.origin.to_json()}
                for g in self.geometry
            ],
            "tip": self.tip.tolist(),
        }

    @classmethod
    def load(cls, path) -> "RobotModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def link_frames(model: RobotModel, q) -> tuple[np.ndarray, np.ndarray]:
    """World rotations ``(n, 3, 3)`` and origins ``(n, 3)`` of every link frame.

    The frame of link ``i`` sits at joint ``i`` after its motion is applied,
    so joint ``i``'s axis in world coordinates is ``R[i] @ axis_i`` and its
    origin is ``p[i]``.
    """
    q = model.check_q(q)
    n = model.n
    Rs = np.empty((n, 3, 3))
    ps = np.empty((n, 3))
    R = np.eye(3)
    p = np.zeros(3)
    for i, joint in enumerate(model.joints):
        Ro, to = model._origins[i]
        p = R @ to + p
        R = R @ Ro
        if model._revolute[i]:
            R = R @ axis_angle_matrix(joint.axis, q[i])
        else:
            p = p + R @ (joint.axis * q[i])
        Rs[i] = R
        ps[i] = p
    return Rs, ps


def _check_link(model: RobotModel, link_index: int) -> int:
    if not 0 <= int(link_index) < model.n:
        raise ContractViolation(f"link index {link_index} out of range")
    return int(link_index)


def forward_kinematics(model: RobotModel, q, link_index: int, local_point=(0.0, 0.0, 0.0)) -> np.ndarray:
    """World position of ``local_point`` rigidly attached to link ``link_index``."""
    link = _check_link(model, link_index)
    Rs, ps = link_frames(model, q)
    return Rs[link] @ np.asarray(local_point, dtype=float) + ps[link]


def joint_axes_world(model: RobotModel, frames) -> tuple[np.ndarray, np.ndarray]:
    """World joint axes ``(n, 3)`` and joint origins ``(n, 3)``.

    A prismatic joint slides its own frame, so its "origin" (unused for the
    linear column) is the frame position before the slide.
    """
    Rs, ps = frames
    axes = np.einsum("nij,nj->ni", Rs, np.array([j.axis for j in model.joints]))
    return axes, ps


def jacobian_at(model: RobotModel, frames, link: int, world_point) -> np.ndarray:
    """3 x n linear Jacobian of a world point fixed to ``link``."""
    axes, origins = joint_axes_world(model, frames)
    J = np.zeros((3, model.n))
    p = np.asarray(world_point, dtype=float)
    k = link + 1
    a = axes[:k].T
    r = (p - origins[:k]).T
    J[0, :k] = a[1] * r[2] - a[2] * r[1]
    J[1, :k] = a[2] * r[0] - a[0] * r[2]
    J[2, :k] = a[0] * r[1] - a[1] * r[0]
    for j in range(k):
        if not model._revolute[j]:
            J[:, j] = axes[j]
    return J


def rotational_jacobian(model: RobotModel, frames, link: int) -> np.ndarray:
    axes, _ = joint_axes_world(model, frames)
    J = np.zeros((3, model.n))
    for j in range(link + 1):
        if model._revolute[j]:
            J[:, j] = axes[j]
    return J


def point_jacobian(model: RobotModel, q, link_index: int, local_point=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Positional Jacobian (3 x n) of a point fixed to link ``link_index``."""
    link = _check_link(model, link_index)
    frames = link_frames(model, q)
    Rs, ps = frames
    p = Rs[link] @ np.asarray(local_point, dtype=float) + ps[link]
    return jacobian_at(model, frames, link, p)


def _config_bound(model: RobotModel, q) -> float:
    frames = link_frames(model, q)
    Rs, ps = frames
    last = model.n - 1
    tip = Rs[last] @ model.tip + ps[last]
    best = np.linalg.norm(jacobian_at(model, frames, last, tip), 2)
    for g in model.geometry:
        center_local, radius = g.shape.bounding_sphere()
        c = Rs[g.link] @ g.origin.apply(center_local) + ps[g.link]
        Jc = jacobian_at(model, frames, g.link, c)
        Jw = rotational_jacobian(model, frames, g.link)
        # J_p = J_c - [p - c]_x J_w, so |J_p| <= |J_c| + radius * |J_w|.
        best = max(best, np.linalg.norm(Jc, 2) + radius * np.linalg.norm(Jw, 2))
    return float(best)


def jacobian_norm_bound(
    model: RobotModel,
    sample_count: int,
    seed: int = 0,
    safety_factor: float = DEFAULT_JMAX_FACTOR,
) -> float:
    """Sampled upper estimate of the largest point-Jacobian spectral norm.

    Configurations are drawn uniformly from the joint-limit box.  At each one
    the tip Jacobian norm is taken, and for every attached body the norm at its
    bounding-sphere center plus radius times the rotational Jacobian norm,
    which bounds the Jacobian of any point on the body.  The maximum is scaled
    by ``safety_factor``.
    """
    if sample_count < 1:
        raise ContractViolation("sample_count must be >= 1")
    if safety_factor < 1.0:
        raise ContractViolation("safety_factor must be >= 1")
    rng = np.random.default_rng(seed)
    samples = rng.uniform(model.lower, model.upper, size=(sample_count, model.n))
    return safety_factor * max(_config_bound(model, q) for q in samples)
