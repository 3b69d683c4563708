"""Waypoint tracking with a saturated P controller and the filtered rollout."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cbf import CbfParams, cbf_step
from .geometry import Pose
from .kinematics import ContractViolation, RobotModel
from .scene import PlanningScene, min_signed_distance

__all__ = [
    "RolloutResult",
    "SceneEvent",
    "Trace",
    "Trajectory",
    "TrackerParams",
    "TrackerState",
    "apply_event",
    "desired_velocity",
    "run_filtered_tracking",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-stamped joint waypoints; ``positions`` has shape ``(m, n)``."""

    times: np.ndarray
    positions: np.ndarray
    behavior: str = ""

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        Q = np.array(self.positions, dtype=float)
        if Q.ndim == 1:
            Q = Q.reshape(1, -1)
        if len(t) == 0 or Q.shape[0] != len(t):
            raise ContractViolation("trajectory needs one timestamp per waypoint and at least one waypoint")
        if np.any(np.diff(t) <= 0):
            raise ContractViolation("trajectory timestamps must be strictly increasing")
        t.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", Q)

    def __len__(self) -> int:
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.behavior == other.behavior
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.positions, other.positions)
        )

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def start(self) -> np.ndarray:
        return self.positions[0]

    @property
    def goal(self) -> np.ndarray:
        return self.positions[-1]

    @classmethod
    def from_waypoints(cls, waypoints, duration: float = 1.0, behavior: str = "") -> "Trajectory":
        Q = np.asarray(waypoints, dtype=float)
        return cls(np.linspace(0.0, duration, len(Q)), Q, behavior)

    def to_json(self) -> dict:
        return {"behavior": self.behavior, "times": self.times.tolist(), "positions": self.positions.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Trajectory":
        return cls(data["times"], data["positions"], data.get("behavior", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t"] + [f"q_{j + 1}" for j in range(self.n)])
        for t, q in zip(self.times, self.positions):
            writer.writerow([repr(float(t))] + [repr(float(x)) for x in q])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, behavior: str = "") -> "Trajectory":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if rows and not _is_number(rows[0][0]):
            rows = rows[1:]
        data = np.array([[float(x) for x in r] for r in rows])
        return cls(data[:, 0], data[:, 1:], behavior)

    @classmethod
    def load(cls, path, behavior: str = "") -> "Trajectory":
        path = Path(path)
        text = path.read_text()
        if path.suffix == ".json":
            return cls.from_json(json.loads(text))
        return cls.from_csv(text, behavior)

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_json()))
        else:
            path.write_text(self.to_csv())


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class TrackerParams:
    """``v_sat`` of None means the model's joint velocity limits."""

    kp: float = 2.0
    epsilon: float = 0.02
    v_sat: Optional[object] = None
    stall_timeout: float = 1.0
    progress_rate: float = 1e-4  # rad/s of distance decrease that counts as progress

    def __post_init__(self):
        if not (self.kp > 0 and self.epsilon > 0 and self.stall_timeout > 0):
            raise ContractViolation("tracker gains must be positive")

    @classmethod
    def from_json(cls, data: dict) -> "TrackerParams":
        return cls(
            kp=float(data.get("kp", 2.0)),
            epsilon=float(data.get("epsilon", 0.02)),
            v_sat=data.get("v_sat"),
            stall_timeout=float(data.get("stall_timeout", 1.0)),
            progress_rate=float(data.get("progress_rate", 1e-4)),
        )

    def to_json(self) -> dict:
        v_sat = self.v_sat
        if isinstance(v_sat, np.ndarray):
            v_sat = v_sat.tolist()
        return {
            "kp": self.kp,
            "epsilon": self.epsilon,
            "v_sat": v_sat,
            "stall_timeout": self.stall_timeout,
            "progress_rate": self.progress_rate,
        }


@dataclass
class TrackerState:
    params: TrackerParams = field(default_factory=TrackerParams)
    index: int = 0
    stall_clock: float = 0.0
    last_distance: Optional[float] = None
    skipped: list = field(default_factory=list)


def desired_velocity(
    state: TrackerState, traj: Trajectory, q, dt: float = 0.0, v_sat=None
) -> tuple[np.ndarray, TrackerState]:
    """Saturated P command toward the current waypoint.

    The waypoint index advances while the robot is within ``epsilon`` of it
    or has made no progress for longer than ``stall_timeout``.  ``dt`` is the
    time since the previous call and drives the stall clock.
    """
    p = state.params
    q = np.asarray(q, dtype=float)
    if q.shape != (traj.n,):
        raise ContractViolation("q dimension does not match trajectory")
    sat = p.v_sat if v_sat is None else v_sat
    sat = np.inf if sat is None else np.asarray(sat, dtype=float)
    last = len(traj) - 1
    index, clock, last_d = state.index, state.stall_clock, state.last_distance
    skipped = list(state.skipped)

    d = float(np.linalg.norm(traj.positions[index] - q))
    if last_d is not None and dt > 0:
        if last_d - d >= p.progress_rate * dt:
            clock = 0.0
        else:
            clock += dt
    while index < last:
        if d < p.epsilon:
            pass
        elif clock > p.stall_timeout:
            log.info("tracker stalled at waypoint %d; advancing", index)
            skipped.append(index)
        else:
            break
        index += 1
        clock = 0.0
        d = float(np.linalg.norm(traj.positions[index] - q))
    v = np.clip(p.kp * (traj.positions[index] - q), -sat, sat)
    new_state = replace(state, index=index, stall_clock=clock, last_distance=d, skipped=skipped)
    return v, new_state


@dataclass(frozen=True)
class SceneEvent:
    """Scripted scene change at time ``time``: enable, disable or move."""

    time: float
    obstacle: str
    action: str
    pose: Optional[Pose] = None

    def __post_init__(self):
        if self.action not in ("enable", "disable", "move"):
            raise ContractViolation(f"unknown event action {self.action!r}")
        if self.action == "move" and self.pose is None:
            raise ContractViolation("move event needs a pose")

    @classmethod
    def from_json(cls, data: dict) -> "SceneEvent":
        pose = data.get("pose")
        return cls(float(data["time"]), data["obstacle"], data["action"], None if pose is None else Pose.from_json(pose))

    def to_json(self) -> dict:
        out = {"time": self.time, "obstacle": self.obstacle, "action": self.action}
        if self.pose is not None:
            out["pose"] = self.pose.to_json()
        return out

    @property
    def label(self) -> str:
        return f"{self.action}:{self.obstacle}"


def apply_event(scene: PlanningScene, event: SceneEvent) -> PlanningScene:
    if event.action == "enable":
        return scene.with_enabled(event.obstacle, True)
    if event.action == "disable":
        return scene.with_enabled(event.obstacle, False)
    return scene.with_pose(event.obstacle, event.pose)


@dataclass
class Trace:
    """Per-step log of a rollout; row ``k`` is the state at ``t[k]``."""

    t: list = field(default_factory=list)
    q: list = field(default_factory=list)
    v: list = field(default_factory=list)
    h_min: list = field(default_factory=list)
    nearest_pair: list = field(default_factory=list)
    qp_status: list = field(default_factory=list)
    event: list = field(default_factory=list)

    def append(self, t, q, v, h, pair, status, event=""):
        self.t.append(float(t))
        self.q.append(np.array(q, dtype=float))
        self.v.append(np.array(v, dtype=float))
        self.h_min.append(float(h))
        self.nearest_pair.append(pair)
        self.qp_status.append(status)
        self.event.append(event)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def h(self) -> np.ndarray:
        return np.array(self.h_min)

    def to_csv(self) -> str:
        n = len(self.q[0]) if self.q else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["t"]
            + [f"q_{j + 1}" for j in range(n)]
            + [f"v_{j + 1}" for j in range(n)]
            + ["h_min", "nearest_pair", "qp_status", "event"]
        )
        for k in range(len(self)):
            writer.writerow(
                [repr(self.t[k])]
                + [repr(float(x)) for x in self.q[k]]
                + [repr(float(x)) for x in self.v[k]]
                + [repr(self.h_min[k]), self.nearest_pair[k], self.qp_status[k], self.event[k]]
            )
        return buf.getvalue()


@dataclass
class RolloutResult:
    trajectory: Trajectory
    trace: Trace
    converged: bool
    final_index: int = 0
    skipped: list = field(default_factory=list)
    toggle_steps: list = field(default_factory=list)
    scene: Optional[PlanningScene] = None


def _pair_label(nearest) -> str:
    return "" if nearest is None else f"{nearest.pair[0]}|{nearest.pair[1]}"


def run_filtered_tracking(
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
    """Track ``traj`` from ``q0`` through the safety filter until the goal or ``t_max``.

    The output trajectory is sampled every ``dt``; the trace has one row per
    sample with the filtered velocity applied from that sample on.  If
    ``step_times`` is a list, the wall time of every filter step is appended.
    """
    q = model.check_q(q0).copy()
    if traj.n != model.n:
        raise ContractViolation("trajectory dimension does not match the robot")
    v_sat = tracker_params.v_sat
    if v_sat is None:
        v_sat = model.velocity_limits
    state = TrackerState(tracker_params)
    pending = sorted(events, key=lambda e: e.time)
    trace = Trace()
    toggles = []
    steps = int(math.floor(t_max / dt + 1e-9))
    converged = False
    k = 0
    while True:
        t = k * dt
        labels = []
        while pending and pending[0].time <= t + 1e-12:
            ev = pending.pop(0)
            scene = apply_event(scene, ev)
            labels.append(ev.label)
        if labels:
            toggles.append(k)
        v_des, state = desired_velocity(state, traj, q, dt if k else 0.0, v_sat)
        at_goal = state.index == len(traj) - 1 and np.linalg.norm(traj.goal - q) < tracker_params.epsilon
        if at_goal or k >= steps:
            h, results = min_signed_distance(scene, model, q)
            trace.append(t, q, np.zeros_like(q), h, _pair_label(results[0] if results else None), "final", ";".join(labels))
            converged = bool(at_goal)
            break
        if step_times is None:
            step = cbf_step(model, scene, q, v_des, cbf_params, dt)
        else:
            start = time.perf_counter()
            step = cbf_step(model, scene, q, v_des, cbf_params, dt)
            step_times.append(time.perf_counter() - start)
        trace.append(t, q, step.v_star, step.h_min, _pair_label(step.nearest), step.diagnostics.status, ";".join(labels))
        q = step.q_next
        k += 1
    out = Trajectory(np.array(trace.t), np.array(trace.q), traj.behavior)
    if not converged:
        log.info("rollout did not reach the goal within %.3f s", t_max)
    return RolloutResult(out, trace, converged, state.index, state.skipped, toggles, scene)
