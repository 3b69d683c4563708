"""Trajectory cache: reuse a stored behavior through the safety filter or re-plan.

Every stored entry is scored against the request by

    T = ||first waypoint - q|| + scene_difference(stored scene, current scene)

and the thresholds ``t1 <= t2 <= t3`` pick the branch:

* the first entry (insertion order) with ``T < t1`` is filtered at once
  (``early_hit``) without scoring the rest;
* otherwise the best entry is filtered; the result is stored only when
  ``t2 <= T_min < t3`` (``filtered`` vs ``filtered_and_cached``);
* ``T_min >= t3``, or no entry with the requested behavior, calls the planner
  fallback and stores its result (``replanned``).

A filter run that does not reach the goal escalates to the fallback.
"""
from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .cbf import CbfParams
from .kinematics import ContractViolation, RobotModel
from .scene import DEFAULT_MISSING_PENALTY, DEFAULT_ROTATION_WEIGHT, PlanningScene, scene_difference
from .tracker import TrackerParams, Trajectory, run_filtered_tracking

__all__ = [
    "CacheFormatError",
    "CacheMiss",
    "CachePolicy",
    "CachedBehavior",
    "Decision",
    "PlanOutcome",
    "TrajectoryCache",
    "load_cache",
    "make_filter",
    "plan_or_filter",
    "save_cache",
    "suitability",
]

log = logging.getLogger(__name__)


class CacheFormatError(ValueError):
    """Malformed cache file or invalid policy."""


class CacheMiss(LookupError):
    """No usable cache entry and no planner fallback was supplied."""


class Decision:
    EARLY_HIT = "early_hit"
    FILTERED = "filtered"
    FILTERED_AND_CACHED = "filtered_and_cached"
    REPLANNED = "replanned"


@dataclass(frozen=True)
class CachePolicy:
    t1: float = 0.05
    t2: float = 0.5
    t3: float = 2.0
    max_entries: int = 500
    rotation_weight: float = DEFAULT_ROTATION_WEIGHT
    missing_penalty: float = DEFAULT_MISSING_PENALTY

    def __post_init__(self):
        if not (0.0 <= self.t1 <= self.t2 <= self.t3):
            raise CacheFormatError(
                f"thresholds must satisfy 0 <= t1 <= t2 <= t3, got {self.t1}, {self.t2}, {self.t3}"
            )
        if self.max_entries < 1:
            raise CacheFormatError("max_entries must be >= 1")

    def to_json(self) -> dict:
        return {
            "t1": self.t1,
            "t2": self.t2,
            "t3": self.t3,
            "max_entries": self.max_entries,
            "rotation_weight": self.rotation_weight,
            "missing_penalty": self.missing_penalty,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CachePolicy":
        try:
            return cls(
                t1=float(data["t1"]),
                t2=float(data["t2"]),
                t3=float(data["t3"]),
                max_entries=int(data.get("max_entries", 500)),
                rotation_weight=float(data.get("rotation_weight", DEFAULT_ROTATION_WEIGHT)),
                missing_penalty=float(data.get("missing_penalty", DEFAULT_MISSING_PENALTY)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CacheFormatError):
                raise
            raise CacheFormatError(f"policy: {exc!r}") from None


@dataclass(frozen=True, eq=False)
class CachedBehavior:
    behavior: str
    scene: PlanningScene
    trajectory: Trajectory
    created_at: float = 0.0

    def __post_init__(self):
        if not self.behavior:
            raise ContractViolation("cached behavior needs a non-empty tag")
        if len(self.trajectory) == 0:
            raise ContractViolation("cached trajectory is empty")

    def __eq__(self, other):
        if not isinstance(other, CachedBehavior):
            return NotImplemented
        return (
            self.behavior == other.behavior
            and self.scene == other.scene
            and self.trajectory == other.trajectory
            and self.created_at == other.created_at
        )

    def to_json(self) -> dict:
        return {
            "behavior": self.behavior,
            "created_at": self.created_at,
            "scene": self.scene.to_json(),
            "trajectory": self.trajectory.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict, model: Optional[RobotModel] = None) -> "CachedBehavior":
        return cls(
            data["behavior"],
            PlanningScene.from_json(data["scene"], model),
            Trajectory.from_json(data["trajectory"]),
            float(data.get("created_at", 0.0)),
        )


class TrajectoryCache:
    """Insertion-ordered store of cached behaviors.

    Insertions are serialized by a lock; readers iterate over an immutable
    snapshot taken under the same lock, so they never see a half-applied
    insertion or eviction.
    """

    def __init__(self, policy: Optional[CachePolicy] = None, entries=(), clock: Callable[[], float] = time.time):
        self.policy = policy or CachePolicy()
        self._entries: tuple = tuple(entries)
        self._lock = threading.Lock()
        self._clock = clock

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.snapshot())

    def __eq__(self, other):
        if not isinstance(other, TrajectoryCache):
            return NotImplemented
        return self.policy == other.policy and self.snapshot() == other.snapshot()

    def snapshot(self) -> tuple:
        with self._lock:
            return self._entries

    def insert(self, behavior: str, scene: PlanningScene, trajectory: Trajectory) -> CachedBehavior:
        entry = CachedBehavior(behavior, scene, trajectory, float(self._clock()))
        with self._lock:
            entries = self._entries + (entry,)
            excess = len(entries) - self.policy.max_entries
            if excess > 0:
                log.info("cache over capacity; evicting %d oldest entries", excess)
                entries = entries[excess:]
            self._entries = entries
        return entry


def suitability(entry: CachedBehavior, scene: PlanningScene, q, policy: Optional[CachePolicy] = None) -> float:
    """``||C_X0 - q|| + scene_difference(entry.scene, scene)``."""
    policy = policy or CachePolicy()
    q = np.asarray(q, dtype=float)
    start = entry.trajectory.start
    if q.shape != start.shape:
        raise ContractViolation(f"state has dimension {q.shape}, cached trajectory {start.shape}")
    d_q = float(np.linalg.norm(start - q))
    d_p = scene_difference(entry.scene, scene, policy.rotation_weight, policy.missing_penalty)
    return d_q + d_p


# (reference trajectory, scene, q) -> (filtered trajectory, reached goal)
FilterFn = Callable[[Trajectory, PlanningScene, np.ndarray], tuple]
# (scene, q) -> trajectory
PlannerFn = Callable[[PlanningScene, np.ndarray], Trajectory]


def make_filter(
    model: RobotModel,
    cbf_params: CbfParams,
    tracker_params: Optional[TrackerParams] = None,
    dt: float = 0.01,
    t_max: float = 10.0,
) -> FilterFn:
    """Filter function running the safety-filtered tracker on a cached reference."""
    tracker_params = tracker_params or TrackerParams()

    def run(reference: Trajectory, scene: PlanningScene, q) -> tuple:
        res = run_filtered_tracking(model, scene, reference, q, cbf_params, tracker_params, dt, t_max)
        return res.trajectory, res.converged

    return run


@dataclass
class PlanOutcome:
    trajectory: Trajectory
    decision: str
    scores: list = field(default_factory=list)  # (cache index, T) per scored entry
    probes: int = 0
    chosen: Optional[int] = None
    escalated: bool = False

    @property
    def t_min(self) -> float:
        return min((s for _, s in self.scores), default=math.inf)

    def to_json(self) -> dict:
        return {
            "decision": self.decision,
            "chosen": self.chosen,
            "probes": self.probes,
            "escalated": self.escalated,
            "scores": [[i, s] for i, s in self.scores],
        }


def plan_or_filter(
    cache: TrajectoryCache,
    behavior: str,
    scene: PlanningScene,
    q,
    policy: Optional[CachePolicy] = None,
    planner_fallback: Optional[PlannerFn] = None,
    filter_fn: Optional[FilterFn] = None,
) -> PlanOutcome:
    """Pick a cached reference and filter it, or re-plan; see the module docstring.

    ``filter_fn`` is required whenever a cached entry can be used.  Raises
    :class:`CacheMiss` when re-planning is needed but no fallback is given.
    """
    policy = policy or cache.policy
    q = np.asarray(q, dtype=float)
    entries = cache.snapshot()
    scores = []
    chosen = None
    t_min = math.inf
    early = False
    for i, entry in enumerate(entries):
        if entry.behavior != behavior:
            continue
        t = suitability(entry, scene, q, policy)
        scores.append((i, t))
        if t < t_min:  # strict: ties keep the lowest index
            chosen, t_min = i, t
        if t < policy.t1:
            early = True
            break
    probes = len(scores)

    if chosen is not None and t_min < policy.t3:
        if filter_fn is None:
            raise ContractViolation("a filter function is needed to reuse cached trajectories")
        if early:
            decision = Decision.EARLY_HIT
        elif t_min < policy.t2:
            decision = Decision.FILTERED
        else:
            decision = Decision.FILTERED_AND_CACHED
        trajectory, ok = filter_fn(entries[chosen].trajectory, scene, q)
        if ok:
            if decision == Decision.FILTERED_AND_CACHED:
                cache.insert(behavior, scene, trajectory)
            return PlanOutcome(trajectory, decision, scores, probes, chosen)
        log.info("filtering cache entry %d did not reach the goal; re-planning", chosen)
        escalated = True
    else:
        escalated = False

    if planner_fallback is None:
        raise CacheMiss(f"no suitable cached {behavior!r} trajectory and no planner fallback")
    trajectory = planner_fallback(scene, q)
    cache.insert(behavior, scene, trajectory)
    return PlanOutcome(trajectory, Decision.REPLANNED, scores, probes, chosen, escalated)


def save_cache(cache: TrajectoryCache, path) -> None:
    data = {"policy": cache.policy.to_json(), "entries": [e.to_json() for e in cache.snapshot()]}
    Path(path).write_text(json.dumps(data))


def load_cache(path, model: Optional[RobotModel] = None) -> TrajectoryCache:
    """Read a cache file, validating the policy and every entry."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CacheFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict) or "policy" not in data or "entries" not in data:
        raise CacheFormatError(f"{path}: expected an object with 'policy' and 'entries'")
    policy = CachePolicy.from_json(data["policy"])
    entries = []
    for i, item in enumerate(data["entries"]):
        try:
            entries.append(CachedBehavior.from_json(item, model))
        except (KeyError, TypeError, ValueError) as exc:
            raise CacheFormatError(f"entry {i}: {exc!r}") from None
    return TrajectoryCache(policy, entries)
