"""Planning scene: obstacles, robot collision bodies and the allowed-collision set."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .geometry import Box, DistanceResult, NumericalFailure, Pose, Shape, shape_from_json, signed_distance
from .kinematics import RobotModel, link_frames

__all__ = [
    "Obstacle",
    "PairQuery",
    "PlanningScene",
    "RobotBody",
    "SceneError",
    "active_pairs",
    "min_signed_distance",
    "nearest_pairs",
    "rotation_angle",
    "scene_difference",
]

log = logging.getLogger(__name__)

DEFAULT_ROTATION_WEIGHT = 0.5  # metres per radian
DEFAULT_MISSING_PENALTY = 10.0  # metres


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    name: str
    shape: Shape
    pose: Pose = field(default_factory=Pose)
    enabled: bool = True


@dataclass(frozen=True)
class RobotBody:
    name: str
    link: int
    shape: Shape
    origin: Pose = field(default_factory=Pose)


@dataclass(frozen=True)
class PairQuery:
    kind: str  # "environment" or "self"
    body_a: str
    body_b: str


def _pair_key(a: str, b: str) -> frozenset:
    return frozenset((a, b))


@dataclass(frozen=True, eq=False)
class PlanningScene:
    """Immutable snapshot of the collision world.

    Use :meth:`build` to get the default allowed-collision set (bodies on the
    same or adjacent links never collide).
    """

    obstacles: tuple = ()
    robot_bodies: tuple = ()
    allowed_pairs: frozenset = frozenset()
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "robot_bodies", tuple(self.robot_bodies))
        object.__setattr__(
            self, "allowed_pairs", frozenset(frozenset(p) for p in self.allowed_pairs)
        )
        object.__setattr__(self, "metadata", dict(self.metadata))
        names = [o.name for o in self.obstacles] + [b.name for b in self.robot_bodies]
        if len(set(names)) != len(names):
            raise SceneError("body and obstacle names must be unique")
        known = set(names)
        for pair in self.allowed_pairs:
            if len(pair) != 2:
                raise SceneError(f"allowed pair {sorted(pair)} must name two distinct bodies")
            if not pair <= known:
                raise SceneError(f"allowed pair {sorted(pair)} references unknown bodies")

    @classmethod
    def build(
        cls,
        obstacles: Iterable[Obstacle] = (),
        robot_bodies: Iterable[RobotBody] = (),
        allowed_pairs: Iterable[Sequence[str]] = (),
        metadata: Optional[Mapping[str, str]] = None,
        allow_adjacent: bool = True,
    ) -> "PlanningScene":
        robot_bodies = tuple(robot_bodies)
        allowed = {_pair_key(*p) for p in allowed_pairs}
        if allow_adjacent:
            for a, b in combinations(robot_bodies, 2):
                if abs(a.link - b.link) <= 1:
                    allowed.add(_pair_key(a.name, b.name))
        return cls(tuple(obstacles), robot_bodies, frozenset(allowed), metadata or {})

    @classmethod
    def for_robot(cls, model: RobotModel, obstacles: Iterable[Obstacle] = (), **kwargs) -> "PlanningScene":
        bodies = [RobotBody(g.name, g.link, g.shape, g.origin) for g in model.geometry]
        return cls.build(obstacles, bodies, **kwargs)

    def __eq__(self, other):
        if not isinstance(other, PlanningScene):
            return NotImplemented
        return (
            self.obstacles == other.obstacles
            and self.robot_bodies == other.robot_bodies
            and self.allowed_pairs == other.allowed_pairs
            and self.metadata == other.metadata
        )

    __hash__ = None

    # -- lookup and edits ---------------------------------------------------

    def obstacle(self, name: str) -> Obstacle:
        for o in self.obstacles:
            if o.name == name:
                return o
        raise KeyError(name)

    def _replace_obstacle(self, name: str, **changes) -> "PlanningScene":
        self.obstacle(name)
        obstacles = tuple(replace(o, **changes) if o.name == name else o for o in self.obstacles)
        return replace(self, obstacles=obstacles)

    def with_enabled(self, name: str, enabled: bool) -> "PlanningScene":
        return self._replace_obstacle(name, enabled=enabled)

    def with_pose(self, name: str, pose: Pose) -> "PlanningScene":
        return self._replace_obstacle(name, pose=pose)

    # -- JSON -----------------------------------------------------------------

    def to_json(self) -> dict:
        out = {
            "obstacles": [
                {"name": o.name, "shape": o.shape.to_json(), "pose": o.pose.to_json(), "enabled": o.enabled}
                for o in self.obstacles
            ],
            "allowed_pairs": sorted(sorted(p) for p in self.allowed_pairs),
            # The pair list above is complete; do not re-derive adjacency on load.
            "allow_adjacent": False,
        }
        if self.robot_bodies:
            out["robot_bodies"] = [
                {"name": b.name, "link": b.link, "shape": b.shape.to_json(), "origin": b.origin.to_json()}
                for b in self.robot_bodies
            ]
        if self.metadata:
            out["metadata"] = dict(self.metadata)
        return out

    @classmethod
    def from_json(cls, data: dict, model: Optional[RobotModel] = None) -> "PlanningScene":
        """Parse the scene format.

        Robot bodies come from ``data["robot_bodies"]`` when present, else
        from ``model``'s geometry.  Adjacent-link pairs are always added to the
        allowed set unless ``"allow_adjacent": false``.
        """
        obstacles = []
        for i, od in enumerate(data.get("obstacles", [])):
            try:
                obstacles.append(
                    Obstacle(
                        od["name"],
                        shape_from_json(od["shape"]),
                        Pose.from_json(od.get("pose")),
                        bool(od.get("enabled", True)),
                    )
                )
            except KeyError as exc:
                raise SceneError(f"obstacle {i}: missing field {exc}") from None
        if "robot_bodies" in data:
            bodies = [
                RobotBody(b["name"], int(b["link"]), shape_from_json(b["shape"]), Pose.from_json(b.get("origin")))
                for b in data["robot_bodies"]
            ]
        elif model is not None:
            bodies = [RobotBody(g.name, g.link, g.shape, g.origin) for g in model.geometry]
        else:
            bodies = []
        return cls.build(
            obstacles,
            bodies,
            data.get("allowed_pairs", []),
            data.get("metadata"),
            allow_adjacent=data.get("allow_adjacent", True),
        )

    @classmethod
    def load(cls, path, model: Optional[RobotModel] = None) -> "PlanningScene":
        return cls.from_json(json.loads(Path(path).read_text()), model)

    # -- cached query structures -------------------------------------------------

    @cached_property
    def _pairs(self) -> tuple:
        return tuple(active_pairs(self))

    @cached_property
    def _index(self) -> dict:
        bodies = {b.name: b for b in self.robot_bodies}
        obstacles = {o.name: o for o in self.obstacles}
        return {"bodies": bodies, "obstacles": obstacles}

    @cached_property
    def _bounds(self):
        """Bounding-sphere centers (link frame for robot bodies, world frame
        for obstacles), per-pair radius sums, and the data for the tighter
        sphere-to-box bound of environment pairs with box obstacles:
        ``(pair indices, box rotations, box centers, half extents, body radii)``.
        """
        body_c, body_r = {}, {}
        for b in self.robot_bodies:
            c, r = b.shape.bounding_sphere()
            body_c[b.name] = b.origin.apply(c)
            body_r[b.name] = r
        for o in self.obstacles:
            c, r = o.shape.bounding_sphere()
            body_c[o.name] = o.pose.apply(c)
            body_r[o.name] = r
        pairs = self._pairs
        ra = np.array([body_r[p.body_a] for p in pairs])
        rb = np.array([body_r[p.body_b] for p in pairs])
        obstacles = self._index["obstacles"]
        box_idx = [
            i
            for i, p in enumerate(pairs)
            if p.kind == "environment" and isinstance(obstacles[p.body_b].shape, Box)
        ]
        boxes = [obstacles[pairs[i].body_b] for i in box_idx]
        box_data = (
            np.array(box_idx, dtype=int),
            np.array([o.pose.rotation for o in boxes]).reshape(-1, 3, 3),
            np.array([o.pose.translation for o in boxes]).reshape(-1, 3),
            np.array([o.shape.half_extents for o in boxes]).reshape(-1, 3),
            ra[box_idx],
        )
        return body_c, ra + rb, box_data


def active_pairs(scene: PlanningScene) -> list:
    """Pairs to check: environment pairs first, then self pairs, each sorted by name."""
    bodies = sorted(scene.robot_bodies, key=lambda b: b.name)
    obstacles = sorted((o for o in scene.obstacles if o.enabled), key=lambda o: o.name)
    pairs = [
        PairQuery("environment", b.name, o.name)
        for b in bodies
        for o in obstacles
        if _pair_key(b.name, o.name) not in scene.allowed_pairs
    ]
    pairs += [
        PairQuery("self", a.name, b.name)
        for a, b in combinations(bodies, 2)
        if _pair_key(a.name, b.name) not in scene.allowed_pairs
    ]
    return pairs


def body_poses(scene: PlanningScene, model: RobotModel, frames) -> dict:
    """World pose of every robot body and obstacle, keyed by name."""
    Rs, ps = frames
    poses = {o.name: o.pose for o in scene.obstacles}
    for b in scene.robot_bodies:
        R = Rs[b.link]
        poses[b.name] = Pose.trusted(R @ b.origin.rotation, R @ b.origin.translation + ps[b.link])
    return poses


def _evaluate(scene: PlanningScene, pair: PairQuery, poses: dict) -> DistanceResult:
    index = scene._index
    a = index["bodies"][pair.body_a]
    if pair.kind == "self":
        b = index["bodies"][pair.body_b]
        links = (a.link, b.link)
    else:
        b = index["obstacles"][pair.body_b]
        links = (a.link, None)
    names = (pair.body_a, pair.body_b)
    try:
        res = signed_distance(a.shape, poses[a.name], b.shape, poses[b.name], names)
    except NumericalFailure as exc:
        log.warning("pair %s/%s failed (%s); treating as -inf", *names, exc)
        est = exc.estimate
        if est is None:
            p = poses[a.name].translation
            est = DistanceResult(-math.inf, p, p, np.array([0.0, 0.0, 1.0]), names)
        return DistanceResult(-math.inf, est.point_a, est.point_b, est.normal, names, links)
    return res.with_pair(names, links)


def _sort_key(r: DistanceResult):
    return (r.signed_distance, r.pair)


def min_signed_distance(scene: PlanningScene, model: RobotModel, q, frames=None):
    """Minimum signed distance over all active pairs, and every pair result sorted ascending.

    Returns ``(inf, [])`` when there are no active pairs.
    """
    if frames is None:
        frames = link_frames(model, q)
    poses = body_poses(scene, model, frames)
    results = sorted((_evaluate(scene, p, poses) for p in scene._pairs), key=_sort_key)
    h = results[0].signed_distance if results else math.inf
    return h, results


def nearest_pairs(scene: PlanningScene, model: RobotModel, q, k: int, frames=None):
    """The ``k`` nearest pair results and the overall minimum.

    Pairs are visited in order of a bounding-sphere lower bound (center
    distance minus both radii) and evaluated exactly until the next lower
    bound exceeds the ``k``-th smallest exact value, so every skipped pair is
    provably farther than the ``k``-th returned one.  The returned minimum
    equals that of :func:`min_signed_distance`.
    """
    if frames is None:
        frames = link_frames(model, q)
    pairs = scene._pairs
    if not pairs:
        return math.inf, []
    poses = body_poses(scene, model, frames)
    centers, rsum, (box_idx, box_R, box_t, box_h, box_r) = scene._bounds
    Rs, ps = frames
    centers = dict(centers)
    for b in scene.robot_bodies:
        centers[b.name] = Rs[b.link] @ centers[b.name] + ps[b.link]
    ca = np.array([centers[p.body_a] for p in pairs])
    cb = np.array([centers[p.body_b] for p in pairs])
    lower = np.linalg.norm(ca - cb, axis=1) - rsum
    if len(box_idx):
        local = np.einsum("kji,kj->ki", box_R, ca[box_idx] - box_t)
        outside = np.maximum(np.abs(local) - box_h, 0.0)
        lower[box_idx] = np.maximum(lower[box_idx], np.linalg.norm(outside, axis=1) - box_r)
    order = np.argsort(lower, kind="stable")
    results = []
    kth = math.inf
    for i in order:
        if len(results) >= k and lower[i] > kth:
            break
        results.append(_evaluate(scene, pairs[i], poses))
        if len(results) >= k:
            kth = sorted(r.signed_distance for r in results)[k - 1]
    results.sort(key=_sort_key)
    return results[0].signed_distance, results[:k]


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle between two rotations (radians)."""
    Rd = np.asarray(Ra).T @ np.asarray(Rb)
    s = 0.5 * np.linalg.norm([Rd[2, 1] - Rd[1, 2], Rd[0, 2] - Rd[2, 0], Rd[1, 0] - Rd[0, 1]])
    c = 0.5 * (np.trace(Rd) - 1.0)
    return float(math.atan2(s, c))


def scene_difference(
    scene_a: PlanningScene,
    scene_b: PlanningScene,
    rotation_weight: float = DEFAULT_ROTATION_WEIGHT,
    missing_penalty: float = DEFAULT_MISSING_PENALTY,
) -> float:
    """Sum over obstacles of translation distance plus weighted rotation angle.

    An obstacle present in only one scene contributes ``missing_penalty``.
    """
    a = {o.name: o.pose for o in scene_a.obstacles}
    b = {o.name: o.pose for o in scene_b.obstacles}
    total = 0.0
    for name in sorted(a.keys() | b.keys()):
        if name not in a or name not in b:
            total += missing_penalty
            continue
        pa, pb = a[name], b[name]
        total += float(np.linalg.norm(pa.translation - pb.translation))
        total += rotation_weight * rotation_angle(pa.rotation, pb.rotation)
    return total
