"""Convex proximity queries: GJK distance, EPA penetration and signed distance.

Every supported shape is a convex polytope "core" (point, segment, box or
hull) inflated by a ball of radius ``margin``.  Spheres are points with a
margin, capsules are segments with a margin.  Distances are computed between
cores and the margins are subtracted afterwards, which is exact for
Minkowski sums with balls.

Conventions for :class:`DistanceResult`:

* ``normal`` points from body B toward body A, i.e. translating A along
  ``normal`` increases the signed distance at unit rate.
* ``point_a - point_b == signed_distance * normal`` in every case.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "Box",
    "Capsule",
    "ConvexHull",
    "DistanceResult",
    "GeometryError",
    "INTERSECTING",
    "NumericalFailure",
    "Pose",
    "Shape",
    "Sphere",
    "epa_penetration",
    "gjk_distance",
    "shape_from_json",
    "signed_distance",
]

GJK_MAX_ITER = 128
EPA_MAX_ITER = 128
_GJK_REL_TOL = 1e-12
_EPA_TOL = 1e-10
_TOUCH_TOL = 1e-10
_EYE3 = np.eye(3)


class GeometryError(Exception):
    """Invalid geometry input or failed proximity query."""


class NumericalFailure(GeometryError):
    """Iterative query did not converge.

    ``estimate`` carries the best available (conservative) result.
    """

    def __init__(self, message: str, estimate: "Optional[DistanceResult]" = None):
        super().__init__(message)
        self.estimate = estimate


class _Intersecting:
    def __repr__(self) -> str:
        return "INTERSECTING"

    def __bool__(self) -> bool:
        return False


#: Returned by :func:`gjk_distance` when the bodies overlap.
INTERSECTING = _Intersecting()


def _cross(a, b):
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def _any_perpendicular(d):
    d = np.asarray(d, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(d)))] = 1.0
    p = _cross(d, axis)
    return p / np.linalg.norm(p)


# ---------------------------------------------------------------------------
# Poses


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation Rz(yaw) @ Ry(pitch) @ Rx(roll) (URDF convention)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid placement: ``x_world = rotation @ x_local + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not np.abs(R.T @ R - _EYE3).max() <= 1e-9 or np.linalg.det(R) < 0:
            raise GeometryError("pose rotation must be a proper orthonormal matrix")
        if not np.all(np.isfinite(t)):
            raise GeometryError("pose translation must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def trusted(cls, rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        """Build without validation; for rotations produced by composition."""
        pose = object.__new__(cls)
        object.__setattr__(pose, "rotation", rotation)
        object.__setattr__(pose, "translation", translation)
        return pose

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_xyz_rpy(cls, xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rpy_matrix(*rpy), np.asarray(xyz, dtype=float))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose.trusted(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Map local point(s) of shape (3,) or (k, 3) to the world frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self) -> str:
        return f"Pose(translation={self.translation.tolist()})"

    def to_json(self) -> dict:
        return {"xyz": self.translation.tolist(), "rotation": self.rotation.tolist()}

    @classmethod
    def from_json(cls, data: Optional[dict]) -> "Pose":
        """Accepts ``{"xyz", "rpy"}``, ``{"xyz", "rotation"}`` or None."""
        if data is None:
            return cls()
        xyz = data.get("xyz", (0.0, 0.0, 0.0))
        if "rotation" in data:
            return cls(np.asarray(data["rotation"], dtype=float), xyz)
        return cls.from_xyz_rpy(xyz, data.get("rpy", (0.0, 0.0, 0.0)))


# ---------------------------------------------------------------------------
# Shapes


class Shape:
    """Convex shape: a polytope core inflated by ``margin``."""

    kind: str = ""

    @property
    def margin(self) -> float:
        return 0.0

    def core_vertices(self) -> np.ndarray:
        raise NotImplementedError

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Local center (inside the shape) and radius enclosing the shape."""
        V = self.core_vertices()
        c = V.mean(axis=0)
        return c, float(np.max(np.linalg.norm(V - c, axis=1))) + self.margin

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Sphere(Shape):
    radius: float
    kind = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise GeometryError("sphere radius must be positive")

    @property
    def margin(self) -> float:
        return self.radius

    def core_vertices(self) -> np.ndarray:
        return np.zeros((1, 3))

    def to_json(self) -> dict:
        return {"type": "sphere", "radius": self.radius}


@dataclass(frozen=True)
class Capsule(Shape):
    """Segment along the local z axis from -half_length to +half_length."""

    half_length: float
    radius: float
    kind = "capsule"

    def __post_init__(self):
        if not (self.half_length > 0 and self.radius > 0):
            raise GeometryError("capsule half_length and radius must be positive")

    @property
    def margin(self) -> float:
        return self.radius

    def core_vertices(self) -> np.ndarray:
        return np.array([[0.0, 0.0, -self.half_length], [0.0, 0.0, self.half_length]])

    def to_json(self) -> dict:
        return {"type": "capsule", "half_length": self.half_length, "radius": self.radius}


@dataclass(frozen=True, eq=False)
class Box(Shape):
    half_extents: np.ndarray
    kind = "box"

    def __post_init__(self):
        h = np.array(self.half_extents, dtype=float).reshape(3)
        if not np.all(h > 0):
            raise GeometryError("box half extents must be positive")
        h.setflags(write=False)
        object.__setattr__(self, "half_extents", h)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        object.__setattr__(self, "_vertices", signs * h)

    def core_vertices(self) -> np.ndarray:
        return self._vertices

    def __eq__(self, other):
        return isinstance(other, Box) and np.array_equal(self.half_extents, other.half_extents)

    def __hash__(self):
        return hash(self.half_extents.tobytes())

    def to_json(self) -> dict:
        return {"type": "box", "half_extents": self.half_extents.tolist()}


@dataclass(frozen=True, eq=False)
class ConvexHull(Shape):
    vertices: np.ndarray
    kind = "hull"

    def __post_init__(self):
        V = np.array(self.vertices, dtype=float)
        if V.ndim != 2 or V.shape[1] != 3 or V.shape[0] < 4:
            raise GeometryError("hull needs at least 4 vertices in R^3")
        if np.linalg.matrix_rank(V[1:] - V[0], tol=1e-9) < 3:
            raise GeometryError("hull vertices must span 3D")
        V.setflags(write=False)
        object.__setattr__(self, "vertices", V)

    def core_vertices(self) -> np.ndarray:
        return self.vertices

    def __eq__(self, other):
        return isinstance(other, ConvexHull) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())

    def to_json(self) -> dict:
        return {"type": "hull", "vertices": self.vertices.tolist()}


def shape_from_json(data: dict) -> Shape:
    kind = data.get("type")
    try:
        if kind == "sphere":
            return Sphere(float(data["radius"]))
        if kind == "capsule":
            return Capsule(float(data["half_length"]), float(data["radius"]))
        if kind == "box":
            return Box(data["half_extents"])
        if kind in ("hull", "convex_hull"):
            return ConvexHull(data["vertices"])
    except KeyError as exc:
        raise GeometryError(f"shape {kind!r} missing field {exc}") from None
    raise GeometryError(f"unknown shape type {kind!r}")


# ---------------------------------------------------------------------------
# Results


@dataclass(frozen=True, eq=False)
class DistanceResult:
    signed_distance: float
    point_a: np.ndarray
    point_b: np.ndarray
    normal: np.ndarray
    pair: tuple = ("", "")
    # Link indices of the bodies; None for world obstacles.
    links: tuple = (None, None)

    @property
    def kind(self) -> str:
        return "self" if self.links[1] is not None else "environment"

    def swapped(self) -> "DistanceResult":
        return DistanceResult(
            self.signed_distance,
            self.point_b,
            self.point_a,
            -self.normal,
            (self.pair[1], self.pair[0]),
            (self.links[1], self.links[0]),
        )

    def with_pair(self, pair, links=(None, None)) -> "DistanceResult":
        return DistanceResult(
            self.signed_distance, self.point_a, self.point_b, self.normal, tuple(pair), tuple(links)
        )


def _result(sd, pa_core, pb_core, normal, ra, rb, pair) -> DistanceResult:
    normal = np.asarray(normal, dtype=float)
    return DistanceResult(
        float(sd), pa_core - ra * normal, pb_core + rb * normal, normal, tuple(pair)
    )


# ---------------------------------------------------------------------------
# Closed forms for point / segment cores


def _closest_on_segment(p0, p1, x) -> np.ndarray:
    d = p1 - p0
    dd = d @ d
    t = 0.0 if dd <= 0.0 else min(1.0, max(0.0, ((x - p0) @ d) / dd))
    return p0 + t * d


def _closest_segment_segment(p1, q1, p2, q2):
    """Closest points between segments [p1, q1] and [p2, q2]."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    if a <= 1e-300 and e <= 1e-300:
        return p1, p2
    if a <= 1e-300:
        s, t = 0.0, min(1.0, max(0.0, f / e))
    else:
        c = d1 @ r
        if e <= 1e-300:
            s, t = min(1.0, max(0.0, -c / a)), 0.0
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = min(1.0, max(0.0, (b * f - c * e) / denom)) if denom > 1e-14 * a * e else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t, s = 1.0, min(1.0, max(0.0, (b - c) / a))
    return p1 + s * d1, p2 + t * d2


def _rounded_result(pa, pb, ra, rb, pair, fallback_normal) -> DistanceResult:
    diff = pa - pb
    d = math.sqrt(diff @ diff)
    if d > 1e-12:
        n = diff / d
    else:
        n = fallback_normal()
    return _result(d - ra - rb, pa, pb, n, ra, rb, pair)


def _point_box(center, box: Box, pose: Pose):
    """Signed core distance from a point to a box.

    Returns ``(s, witness_on_box, normal_box_to_point)`` in world coordinates.
    """
    h = box.half_extents
    c = pose.rotation.T @ (center - pose.translation)
    q = np.clip(c, -h, h)
    diff = c - q
    d = math.sqrt(diff @ diff)
    if d > 0.0:
        n = diff / d
        s = d
    else:
        gaps = h - np.abs(c)
        i = int(np.argmin(gaps))
        n = np.zeros(3)
        n[i] = 1.0 if c[i] >= 0.0 else -1.0
        q = c.copy()
        q[i] = h[i] * n[i]
        s = -float(gaps[i])
    return s, pose.apply(q), pose.rotation @ n


def _closed_form(shape_a, pose_a, shape_b, pose_b, pair) -> Optional[DistanceResult]:
    ka, kb = shape_a.kind, shape_b.kind
    rounded = ("sphere", "capsule")
    if ka in rounded and kb in rounded:
        ra, rb = shape_a.margin, shape_b.margin
        if ka == "sphere" and kb == "sphere":
            pa, pb = pose_a.translation, pose_b.translation
            return _rounded_result(pa, pb, ra, rb, pair, lambda: np.array([0.0, 0.0, 1.0]))
        Va = pose_a.apply(shape_a.core_vertices())
        Vb = pose_b.apply(shape_b.core_vertices())
        if ka == "sphere":
            pa = Va[0]
            pb = _closest_on_segment(Vb[0], Vb[1], pa)
            fallback = lambda: _any_perpendicular(Vb[1] - Vb[0])  # noqa: E731
        elif kb == "sphere":
            pb = Vb[0]
            pa = _closest_on_segment(Va[0], Va[1], pb)
            fallback = lambda: _any_perpendicular(Va[1] - Va[0])  # noqa: E731
        else:
            pa, pb = _closest_segment_segment(Va[0], Va[1], Vb[0], Vb[1])

            def fallback():
                da, db = Va[1] - Va[0], Vb[1] - Vb[0]
                c = _cross(da, db)
                nc = np.linalg.norm(c)
                return c / nc if nc > 1e-12 else _any_perpendicular(da)

        return _rounded_result(pa, pb, ra, rb, pair, fallback)
    if ka == "sphere" and kb == "box":
        s, q, n = _point_box(pose_a.translation, shape_b, pose_b)
        return _result(s - shape_a.radius, pose_a.translation, q, n, shape_a.radius, 0.0, pair)
    if ka == "box" and kb == "sphere":
        return _closed_form(shape_b, pose_b, shape_a, pose_a, pair[::-1]).swapped()
    return None


# ---------------------------------------------------------------------------
# GJK


class _Support:
    """Support mapping of the Minkowski difference A - B of two vertex sets."""

    __slots__ = ("Va", "Vb")

    def __init__(self, Va, Vb):
        self.Va = Va
        self.Vb = Vb

    def __call__(self, d):
        pa = self.Va[int(np.argmax(self.Va @ d))]
        pb = self.Vb[int(np.argmin(self.Vb @ d))]
        return pa - pb, pa, pb


def _closest_segment(W):
    a, b = W
    ab = b - a
    t = -(a @ ab)
    if t <= 0.0:
        return a, (0,), (1.0,)
    denom = ab @ ab
    if t >= denom:
        return b, (1,), (1.0,)
    t /= denom
    return a + t * ab, (0, 1), (1.0 - t, t)


def _closest_triangle(a, b, c):
    """Closest point to the origin on triangle abc with barycentric weights."""
    ab = b - a
    ac = c - a
    d1 = -(ab @ a)
    d2 = -(ac @ a)
    if d1 <= 0.0 and d2 <= 0.0:
        return a, (0,), (1.0,)
    d3 = -(ab @ b)
    d4 = -(ac @ b)
    if d3 >= 0.0 and d4 <= d3:
        return b, (1,), (1.0,)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3) if d1 > d3 else 0.0  # d1 == d3 only for a repeated vertex
        return a + v * ab, (0, 1), (1.0 - v, v)
    d5 = -(ab @ c)
    d6 = -(ac @ c)
    if d6 >= 0.0 and d5 <= d6:
        return c, (2,), (1.0,)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6) if d2 > d6 else 0.0
        return a + w * ac, (0, 2), (1.0 - w, w)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        span = (d4 - d3) + (d5 - d6)
        w = (d4 - d3) / span if span > 0.0 else 0.0
        return b + w * (c - b), (1, 2), (1.0 - w, w)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + v * ab + w * ac, (0, 1, 2), (1.0 - v - w, v, w)


_TET_FACES = ((0, 1, 2, 3), (0, 2, 3, 1), (0, 3, 1, 2), (1, 3, 2, 0))


def _closest_tetrahedron(W):
    best = None
    for i, j, k, o in _TET_FACES:
        a, b, c = W[i], W[j], W[k]
        n = _cross(b - a, c - a)
        side_origin = -(n @ a)
        side_other = n @ (W[o] - a)
        if side_origin * side_other > 0.0 and abs(side_other) > 1e-14 * (n @ n + 1e-300):
            continue
        p, idx, lam = _closest_triangle(a, b, c)
        dist = p @ p
        if best is None or dist < best[0]:
            best = (dist, p, tuple((i, j, k)[m] for m in idx), lam)
    if best is None:
        return None
    return best[1], best[2], best[3]


def _closest_on_simplex(W):
    m = len(W)
    if m == 1:
        return W[0], (0,), (1.0,)
    if m == 2:
        return _closest_segment(W)
    if m == 3:
        return _closest_triangle(*W)
    return _closest_tetrahedron(W)


@dataclass
class _GjkOutcome:
    intersecting: bool
    distance: float
    pa: np.ndarray
    pb: np.ndarray
    simplex: list  # list of (w, pa, pb)
    iterations: int


def _gjk(support: _Support, initial_dir, max_iter: int = GJK_MAX_ITER) -> _GjkOutcome:
    v = np.asarray(initial_dir, dtype=float)
    if v @ v < 1e-24:
        v = np.array([1.0, 0.0, 0.0])
    w, pa, pb = support(-v)
    simplex = [(w, pa, pb)]
    lam = (1.0,)
    v = w
    for it in range(1, max_iter + 1):
        vv = v @ v
        if vv <= 1e-24:
            return _GjkOutcome(True, 0.0, pa, pb, simplex, it)
        w, wa, wb = support(-v)
        # A repeated support point also ends here, since v @ w == v @ v on the simplex.
        if vv - v @ w <= _GJK_REL_TOL * vv:
            break
        trial = simplex + [(w, wa, wb)]
        closest = _closest_on_simplex([s[0] for s in trial])
        if closest is None:
            return _GjkOutcome(True, 0.0, pa, pb, trial, it)
        v_new, idx, lam_new = closest
        if v_new @ v_new >= vv:
            # No progress: the current estimate is optimal to round-off.
            break
        simplex = [trial[i] for i in idx]
        lam = lam_new
        v = v_new
    else:
        raise NumericalFailure("GJK did not converge", None)
    pa = sum(l * s[1] for l, s in zip(lam, simplex))
    pb = sum(l * s[2] for l, s in zip(lam, simplex))
    d = math.sqrt(v @ v)
    return _GjkOutcome(d <= 1e-12, d, np.asarray(pa), np.asarray(pb), simplex, it)


# ---------------------------------------------------------------------------
# EPA


_BLOWUP_DIRS = np.array(
    [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [0.577350269, 0.577350269, 0.577350269],
        [-0.577350269, -0.577350269, 0.577350269],
        [0.577350269, -0.577350269, -0.577350269],
        [-0.577350269, 0.577350269, -0.577350269],
    ]
)


def _initial_tetrahedron(support: _Support, simplex):
    """Grow a GJK terminal simplex into a full-dimensional tetrahedron."""
    pts = list(simplex)
    candidates = [support(d) for d in _BLOWUP_DIRS]
    for cand in candidates:
        if len(pts) == 4:
            break
        trial = [p[0] for p in pts] + [cand[0]]
        base = np.array(trial[1:]) - trial[0]
        if np.linalg.matrix_rank(base, tol=1e-10) == len(trial) - 1:
            pts.append(cand)
    if len(pts) < 4:
        return None
    return pts


def _epa(support: _Support, simplex, max_iter: int = EPA_MAX_ITER):
    """Penetration of the origin into the Minkowski difference.

    Returns ``(depth, outward_normal, pa, pb)`` where ``pa - pb`` is the point
    of the difference boundary closest to the origin.
    """
    pts = _initial_tetrahedron(support, simplex)
    if pts is None:
        raise NumericalFailure("EPA: degenerate initial simplex")
    W = [p[0] for p in pts]
    PA = [p[1] for p in pts]
    PB = [p[2] for p in pts]
    interior = sum(W) / 4.0

    faces = []  # [i, j, k, normal, dist]

    def make_face(i, j, k):
        n = _cross(W[j] - W[i], W[k] - W[i])
        nn = math.sqrt(n @ n)
        if nn < 1e-300:
            return None
        n = n / nn
        if n @ (W[i] - interior) < 0.0:
            n = -n
            j, k = k, j
        return [i, j, k, n, float(n @ W[i])]

    for i, j, k, _ in _TET_FACES:
        f = make_face(i, j, k)
        if f is None:
            raise NumericalFailure("EPA: degenerate initial tetrahedron")
        faces.append(f)
    if min(f[4] for f in faces) < -1e-9:
        raise NumericalFailure("EPA: origin outside initial polytope")

    best = None
    for _ in range(max_iter):
        best = min(faces, key=lambda f: f[4])
        n, dist = best[3], best[4]
        w, wa, wb = support(n)
        if w @ n - dist <= _EPA_TOL * max(1.0, abs(dist)):
            break
        new = len(W)
        W.append(w)
        PA.append(wa)
        PB.append(wb)
        visible = [f for f in faces if f[3] @ (w - W[f[0]]) > 1e-12]
        if not visible:
            break
        edges = {}
        for f in visible:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                if (b, a) in edges:
                    del edges[(b, a)]
                else:
                    edges[(a, b)] = True
        faces = [f for f in faces if not any(f is g for g in visible)]
        for a, b in edges:
            n_new = _cross(W[b] - W[a], W[new] - W[a])
            nn = math.sqrt(n_new @ n_new)
            if nn < 1e-300:
                continue
            n_new = n_new / nn
            faces.append([a, b, new, n_new, float(n_new @ W[a])])
        if not faces:
            raise NumericalFailure("EPA: polytope collapsed")
    else:
        raise NumericalFailure("EPA did not converge")

    i, j, k, n, dist = best
    p = dist * n
    T = np.column_stack((W[i] - W[k], W[j] - W[k]))
    lam2, *_ = np.linalg.lstsq(T, p - W[k], rcond=None)
    l0, l1 = float(lam2[0]), float(lam2[1])
    l2 = 1.0 - l0 - l1
    pa = l0 * PA[i] + l1 * PA[j] + l2 * PA[k]
    pb = l0 * PB[i] + l1 * PB[j] + l2 * PB[k]
    return max(dist, 0.0), n, pa, pb


# ---------------------------------------------------------------------------
# Public queries


def _world_cores(shape_a, pose_a, shape_b, pose_b):
    Va = pose_a.apply(shape_a.core_vertices())
    Vb = pose_b.apply(shape_b.core_vertices())
    return Va, Vb


def _conservative_estimate(shape_a, pose_a, shape_b, pose_b, pair) -> DistanceResult:
    """Deep fallback: the larger bounding radius sum as penetration depth."""
    ca, ra = shape_a.bounding_sphere()
    cb, rb = shape_b.bounding_sphere()
    pa, pb = pose_a.apply(ca), pose_b.apply(cb)
    diff = pa - pb
    d = np.linalg.norm(diff)
    n = diff / d if d > 1e-12 else np.array([0.0, 0.0, 1.0])
    depth = 2.0 * (ra + rb)
    return DistanceResult(-depth, pa, pa + depth * n, n, tuple(pair))


def gjk_distance(shape_a: Shape, pose_a: Pose, shape_b: Shape, pose_b: Pose, pair=("a", "b")):
    """Separation distance by GJK, or :data:`INTERSECTING` if the bodies overlap."""
    Va, Vb = _world_cores(shape_a, pose_a, shape_b, pose_b)
    support = _Support(Va, Vb)
    try:
        g = _gjk(support, Va[0] - Vb[0])
    except NumericalFailure as exc:
        raise NumericalFailure(
            str(exc), _conservative_estimate(shape_a, pose_a, shape_b, pose_b, pair)
        ) from None
    ra, rb = shape_a.margin, shape_b.margin
    if g.intersecting or g.distance - ra - rb <= 0.0:
        return INTERSECTING
    n = (g.pa - g.pb) / g.distance
    return _result(g.distance - ra - rb, g.pa, g.pb, n, ra, rb, pair)


def _penetration_from_gjk(support, g, shape_a, pose_a, shape_b, pose_b, pair):
    ra, rb = shape_a.margin, shape_b.margin
    if not g.intersecting and g.distance > _TOUCH_TOL:
        n = (g.pa - g.pb) / g.distance
        return _result(g.distance - ra - rb, g.pa, g.pb, n, ra, rb, pair)
    try:
        depth, n_out, pa, pb = _epa(support, g.simplex)
    except NumericalFailure as exc:
        raise NumericalFailure(
            str(exc), _conservative_estimate(shape_a, pose_a, shape_b, pose_b, pair)
        ) from None
    normal = -n_out
    return _result(-depth - ra - rb, pa, pb, normal, ra, rb, pair)


def epa_penetration(shape_a: Shape, pose_a: Pose, shape_b: Shape, pose_b: Pose, pair=("a", "b")):
    """Penetration depth (as a negative signed distance) of overlapping bodies."""
    Va, Vb = _world_cores(shape_a, pose_a, shape_b, pose_b)
    support = _Support(Va, Vb)
    try:
        g = _gjk(support, Va[0] - Vb[0])
    except NumericalFailure as exc:
        raise NumericalFailure(
            str(exc), _conservative_estimate(shape_a, pose_a, shape_b, pose_b, pair)
        ) from None
    if not g.intersecting and g.distance - shape_a.margin - shape_b.margin > 0.0:
        raise GeometryError("epa_penetration called on separated bodies")
    return _penetration_from_gjk(support, g, shape_a, pose_a, shape_b, pose_b, pair)


def signed_distance(
    shape_a: Shape, pose_a: Pose, shape_b: Shape, pose_b: Pose, pair=("a", "b")
) -> DistanceResult:
    """Signed distance: positive separation, negative penetration depth."""
    closed = _closed_form(shape_a, pose_a, shape_b, pose_b, tuple(pair))
    if closed is not None:
        return closed
    Va, Vb = _world_cores(shape_a, pose_a, shape_b, pose_b)
    support = _Support(Va, Vb)
    try:
        g = _gjk(support, Va[0] - Vb[0])
    except NumericalFailure as exc:
        raise NumericalFailure(
            str(exc), _conservative_estimate(shape_a, pose_a, shape_b, pose_b, pair)
        ) from None
    return _penetration_from_gjk(support, g, shape_a, pose_a, shape_b, pose_b, tuple(pair))
