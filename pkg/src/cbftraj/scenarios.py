"""Reference robots, scenes and scenarios used by the CLI, benchmarks and tests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cbf import CbfParams, build_constraint
from .geometry import Box, Capsule, ConvexHull, Pose, Sphere
from .kinematics import ContractViolation, Joint, LinkGeometry, RobotModel, forward_kinematics, jacobian_norm_bound
from .scene import Obstacle, PlanningScene, min_signed_distance
from .sim import TrackingPlant
from .tracker import SceneEvent, TrackerParams, Trajectory

__all__ = [
    "BUILTINS",
    "ScenarioError",
    "ScenarioSpec",
    "blocked_scenario",
    "builtin_scenario",
    "certificate_scenario",
    "example_arm",
    "example1_scenario",
    "free_scenario",
    "kitchen_scenario",
    "planar_arm",
    "random_chain",
    "random_scenario",
    "load_scenario",
    "save_scenario",
    "scenario_from_json",
    "scenario_to_json",
]

class ScenarioError(ValueError):
    """Missing or malformed scenario input."""


EXAMPLE1_TOOL_RADIUS = 0.05
EXAMPLE1_OBSTACLE_RADIUS = 0.1


@dataclass
class ScenarioSpec:
    model: RobotModel
    scene: PlanningScene
    reference: Trajectory
    q0: np.ndarray
    cbf: CbfParams
    tracker: TrackerParams = field(default_factory=TrackerParams)
    dt: float = 0.01
    t_max: float = 10.0
    events: tuple = ()
    seed: int = 0
    name: str = ""
    plant: Optional[TrackingPlant] = None
    qdot0: Optional[np.ndarray] = None


def planar_arm(lengths=(1.0, 1.0), velocity: float = 1.0) -> RobotModel:
    """Planar chain of z-axis revolute joints; ``tip`` sits at the last link's end."""
    joints = []
    offset = 0.0
    for length in lengths:
        joints.append(
            Joint("revolute", (0.0, 0.0, 1.0), Pose.from_xyz_rpy((offset, 0.0, 0.0)), -np.pi, np.pi, velocity)
        )
        offset = length
    return RobotModel(joints, tip=(lengths[-1], 0.0, 0.0))


def example_arm(tool_radius: float = EXAMPLE1_TOOL_RADIUS, link_capsules: bool = False) -> RobotModel:
    """Six-joint anthropomorphic arm with a spherical tool at the flange.

    Zero configuration points straight up; reach is about 1.15 m.
    """
    z, y = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)
    spec = [
        (z, (0.0, 0.0, 0.30), 2.0),
        (y, (0.0, 0.0, 0.10), 2.0),
        (y, (0.0, 0.0, 0.50), 2.0),
        (z, (0.0, 0.0, 0.20), 2.5),
        (y, (0.0, 0.0, 0.25), 2.5),
        (z, (0.0, 0.0, 0.10), 3.0),
    ]
    joints = [
        Joint("revolute", axis, Pose.from_xyz_rpy(xyz), -np.pi, np.pi, vel) for axis, xyz, vel in spec
    ]
    # Joints 1, 2 and 4 get tighter limits like a real arm.
    for i, lim in ((1, 2.0), (2, 2.5), (4, 2.0)):
        j = joints[i]
        joints[i] = Joint(j.type, j.axis, j.origin, -lim, lim, j.velocity)
    tip = (0.0, 0.0, 0.10)
    geometry = [LinkGeometry(5, Sphere(tool_radius), Pose.from_xyz_rpy(tip), "tool")]
    if link_capsules:
        geometry += [
            LinkGeometry(1, Capsule(0.25, 0.06), Pose.from_xyz_rpy((0.0, 0.0, 0.25)), "upper_arm"),
            LinkGeometry(2, Capsule(0.12, 0.05), Pose.from_xyz_rpy((0.0, 0.0, 0.2)), "forearm"),
        ]
    return RobotModel(joints, geometry, tip)


def _interp(q_start, q_goal, count: int, duration: float, behavior: str) -> Trajectory:
    s = np.linspace(0.0, 1.0, count)[:, None]
    Q = (1.0 - s) * np.asarray(q_start) + s * np.asarray(q_goal)
    return Trajectory(np.linspace(0.0, duration, count), Q, behavior)


def example1_scenario(
    robust_margin: bool = False, alpha: float = 4.0, dt: float = 0.01, offset: float = 0.05
) -> ScenarioSpec:
    """Spherical tool sweeping through a spherical obstacle.

    The reference moves the base joint so that the tool's straight path passes
    ``offset`` metres above the obstacle center; the filter has to deflect it.
    """
    model = example_arm()
    q_start = np.array([-0.9, 0.7, 0.9, 0.0, 0.7, 0.0])
    q_goal = np.array([0.9, 0.7, 0.9, 0.0, 0.7, 0.0])
    q_mid = 0.5 * (q_start + q_goal)
    center = forward_kinematics(model, q_mid, 5, model.tip) - np.array([0.0, 0.0, offset])
    scene = PlanningScene.for_robot(
        model, [Obstacle("ball", Sphere(EXAMPLE1_OBSTACLE_RADIUS), Pose.from_xyz_rpy(center))]
    )
    reference = _interp(q_start, q_goal, 7, 3.0, "sweep")
    j_max = jacobian_norm_bound(model, 256, seed=0)
    cbf = CbfParams(alpha=alpha, q_dot_max=1.0, robust_margin=robust_margin, j_max=j_max, max_pairs=10)
    tracker = TrackerParams(kp=4.0, epsilon=0.02, v_sat=0.6, stall_timeout=0.5)
    return ScenarioSpec(model, scene, reference, q_start, cbf, tracker, dt, 15.0, name="example1")


def random_chain(n: int, rng: np.random.Generator, velocity: float = 1.5) -> RobotModel:
    """Random revolute chain with capsule links and a sphere tool."""
    joints = []
    geometry = []
    for i in range(n):
        axis = rng.normal(size=3)
        if i == 0:
            axis = np.array([0.0, 0.0, 1.0])
        axis /= np.linalg.norm(axis)
        length = rng.uniform(0.2, 0.45) if i else 0.2
        xyz = (0.0, 0.0, 0.15) if i == 0 else (0.0, 0.0, prev_len)
        joints.append(Joint("revolute", axis, Pose.from_xyz_rpy(xyz), -2.5, 2.5, velocity))
        geometry.append(
            LinkGeometry(i, Capsule(0.5 * length, 0.04), Pose.from_xyz_rpy((0.0, 0.0, 0.5 * length)), f"l{i}")
        )
        prev_len = length
    tip = (0.0, 0.0, prev_len)
    geometry.append(LinkGeometry(n - 1, Sphere(0.05), Pose.from_xyz_rpy(tip), "tool"))
    return RobotModel(joints, geometry, tip)


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def _random_shape(rng, scale: float):
    kind = rng.integers(4)
    if kind == 0:
        return Sphere(rng.uniform(0.4, 1.0) * scale)
    if kind == 1:
        return Capsule(rng.uniform(0.3, 1.0) * scale, rng.uniform(0.2, 0.5) * scale)
    if kind == 2:
        return Box(rng.uniform(0.3, 1.0, 3) * scale)
    return ConvexHull(rng.normal(size=(8, 3)) * 0.6 * scale)


def random_scenario(
    seed: int,
    n_joints: Optional[int] = None,
    n_obstacles: Optional[int] = None,
    robust_margin: bool = True,
    dt: float = 0.01,
    t_max: float = 4.0,
    alpha: float = 40.0,
    q_dot_max: float = 0.25,
) -> ScenarioSpec:
    """Random chain, random convex obstacles and a reference that crosses them.

    At least one obstacle is centered on a tool position along the reference,
    so the unfiltered motion collides.  The start configuration is collision
    free.
    """
    rng = np.random.default_rng(seed)
    n = int(n_joints if n_joints is not None else rng.integers(2, 7))
    count = int(n_obstacles if n_obstacles is not None else rng.integers(1, 37))
    model = random_chain(n, rng)
    j_max = jacobian_norm_bound(model, 200, seed=seed)
    # Start where holding still satisfies every robust constraint, so the
    # filter problem is feasible at q0.
    clearance = {"environment": 2.0 * j_max * q_dot_max / alpha, "self": 4.0 * j_max * q_dot_max / alpha}
    for _ in range(500):
        q_start = rng.uniform(-2.0, 2.0, n)
        q_goal = np.clip(q_start + rng.uniform(-1.2, 1.2, n), -2.4, 2.4)
        reference = _interp(q_start, q_goal, 11, 2.0, f"random{seed}")
        s = rng.uniform(0.35, 0.65)
        hit = forward_kinematics(model, (1 - s) * q_start + s * q_goal, n - 1, model.tip)
        obstacles = [Obstacle("o00", Sphere(rng.uniform(0.05, 0.12)), Pose.from_xyz_rpy(hit))]
        for i in range(1, count):
            center = rng.uniform(-1.0, 1.0, 3) * np.array([1.2, 1.2, 0.8]) + np.array([0.0, 0.0, 0.5])
            obstacles.append(
                Obstacle(f"o{i:02d}", _random_shape(rng, 0.12), Pose(_random_rotation(rng), center))
            )
        scene = PlanningScene.for_robot(model, obstacles)
        _, results = min_signed_distance(scene, model, q_start)
        if all(r.signed_distance > clearance[r.kind] + 0.01 for r in results):
            break
    else:
        raise RuntimeError(f"could not place a feasible start for seed {seed}")
    cbf = CbfParams(alpha=alpha, q_dot_max=q_dot_max, robust_margin=robust_margin, j_max=j_max, max_pairs=10)
    tracker = TrackerParams(kp=2.0, epsilon=0.03, v_sat=q_dot_max, stall_timeout=0.5)
    return ScenarioSpec(model, scene, reference, q_start, cbf, tracker, dt, t_max, seed=seed, name=f"random{seed}")


def kitchen_scenario(n_obstacles: int = 36, seed: int = 7, robust_margin: bool = False) -> ScenarioSpec:
    """Example arm among a cluttered synthetic kitchen of convex bodies.

    The layout loosely follows a frying station: a frame and hood of boxes,
    fryers, hull-shaped baskets and a glass pane, padded with small clutter to
    reach ``n_obstacles``.
    """
    rng = np.random.default_rng(seed)
    model = example_arm(link_capsules=True)
    obstacles = [
        Obstacle("floor", Box((1.5, 1.5, 0.05)), Pose.from_xyz_rpy((0.0, 0.0, -0.05))),
        Obstacle("hood", Box((0.6, 0.4, 0.05)), Pose.from_xyz_rpy((0.0, 0.75, 1.55))),
        Obstacle("glass", Box((0.9, 0.01, 0.5)), Pose.from_xyz_rpy((0.0, -1.0, 0.8))),
        Obstacle("frame_left", Box((0.05, 0.05, 0.8)), Pose.from_xyz_rpy((-1.1, 0.6, 0.8))),
        Obstacle("frame_right", Box((0.05, 0.05, 0.8)), Pose.from_xyz_rpy((1.1, 0.6, 0.8))),
    ]
    for i, x in enumerate((-0.55, 0.0, 0.55)):
        obstacles.append(Obstacle(f"fryer{i}", Box((0.22, 0.25, 0.2)), Pose.from_xyz_rpy((x, 0.8, 0.2))))
    basket = np.array(
        [[sx * 0.1, sy * 0.12, sz * 0.06] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    ) * np.array([1.0, 1.0, 1.0])
    for i, x in enumerate((-0.65, -0.45, -0.1, 0.1, 0.45, 0.65)):
        obstacles.append(
            Obstacle(f"basket{i}", ConvexHull(basket * rng.uniform(0.9, 1.1, 3)), Pose.from_xyz_rpy((x, 0.75, 0.5)))
        )
    i = 0
    while len(obstacles) < n_obstacles:
        center = np.array([rng.uniform(-1.0, 1.0), rng.uniform(0.55, 1.0), rng.uniform(0.05, 1.4)])
        obstacles.append(Obstacle(f"clutter{i:02d}", _random_shape(rng, 0.05), Pose(_random_rotation(rng), center)))
        i += 1
    obstacles = obstacles[:n_obstacles]
    scene = PlanningScene.for_robot(model, obstacles)
    q_start = np.array([-0.9, 0.4, 1.2, 0.0, 0.9, 0.0])
    q_goal = np.array([0.9, 0.4, 1.2, 0.0, 0.9, 0.0])
    reference = _interp(q_start, q_goal, 7, 2.0, "fryer_sweep")
    j_max = jacobian_norm_bound(model, 256, seed=seed)
    cbf = CbfParams(alpha=5.0, q_dot_max=1.0, robust_margin=robust_margin, j_max=j_max, max_pairs=10)
    tracker = TrackerParams(kp=8.0, epsilon=0.05, v_sat=1.0, stall_timeout=0.5)
    return ScenarioSpec(model, scene, reference, q_start, cbf, tracker, 0.01, 6.0, name="kitchen")


def free_scenario() -> ScenarioSpec:
    """Example arm with no obstacles; the filter never acts."""
    spec = example1_scenario()
    return replace(spec, scene=PlanningScene.for_robot(spec.model, []), name="free")


def blocked_scenario(t_max: float = 4.0) -> ScenarioSpec:
    """Reference whose goal puts the tool inside the obstacle; cannot converge."""
    spec = example1_scenario()
    goal = spec.reference.goal
    center = forward_kinematics(spec.model, goal, spec.model.n - 1, spec.model.tip)
    ball = Obstacle("ball", Sphere(EXAMPLE1_OBSTACLE_RADIUS), Pose.from_xyz_rpy(center))
    return replace(spec, scene=PlanningScene.for_robot(spec.model, [ball]), t_max=t_max, name="blocked")


def certificate_scenario(
    seed: int, lam_factor: float = 4.0, fraction: float = 0.8, mode: str = "first_order_error"
) -> ScenarioSpec:
    """Random scenario started with a velocity error pointing into the nearest obstacle.

    The error norm is ``fraction`` of the largest one that keeps the start in
    the safe set for the plant rate ``lam_factor * alpha``.
    """
    spec = random_scenario(seed, t_max=2.0)
    alpha = spec.cbf.alpha
    lam = lam_factor * alpha
    h0, results = min_signed_distance(spec.scene, spec.model, spec.q0)
    a = build_constraint(results[0], spec.model, spec.q0, spec.cbf).a
    size = fraction * h0 * (lam - alpha) / spec.cbf.j_max
    qdot0 = -size * a / np.linalg.norm(a)
    return replace(spec, plant=TrackingPlant(lam, 1.0, mode), qdot0=qdot0, name=f"certificate{seed}")


BUILTINS = ("example1", "kitchen", "free", "blocked", "random-<seed>", "certificate-<seed>")


def builtin_scenario(name: str) -> ScenarioSpec:
    if name == "example1":
        return example1_scenario()
    if name == "kitchen":
        return kitchen_scenario()
    if name == "free":
        return free_scenario()
    if name == "blocked":
        return blocked_scenario()
    for prefix, make in (("random-", random_scenario), ("certificate-", certificate_scenario)):
        if name.startswith(prefix) and name[len(prefix):].isdigit():
            return make(int(name[len(prefix):]))
    raise ScenarioError(f"unknown builtin scenario {name!r}; choose from {', '.join(BUILTINS)}")


# ---------------------------------------------------------------------------
# Scenario files


def _resolve(value, base: Path, loader):
    if isinstance(value, str):
        path = base / value
        if not path.exists():
            raise ScenarioError(f"referenced file {path} does not exist")
        return loader(path)
    return value


def _read_json(path: Path) -> dict:
    return json.loads(path.read_text())


def scenario_from_json(data: dict, base=".") -> ScenarioSpec:
    """Build a scenario from its JSON form; file references are relative to ``base``."""
    base = Path(base)
    try:
        model = RobotModel.from_json(_resolve(data["robot"], base, _read_json))
        scene = PlanningScene.from_json(_resolve(data["scene"], base, _read_json), model)
        ref = data["reference"]
        if isinstance(ref, str):
            if not (base / ref).exists():
                raise ScenarioError(f"referenced file {base / ref} does not exist")
            reference = Trajectory.load(base / ref, data.get("behavior", ""))
        else:
            reference = Trajectory.from_json(ref)
        seed = int(data.get("seed", 0))
        cbf_data = dict(data.get("cbf", {}))
        if cbf_data.get("j_max") is None:
            cbf_data["j_max"] = jacobian_norm_bound(model, int(cbf_data.pop("j_max_samples", 256)), seed)
        cbf_data.pop("j_max_samples", None)
        cbf = CbfParams.from_json(cbf_data)
        tracker = TrackerParams.from_json(data.get("tracker", {}))
        events = tuple(SceneEvent.from_json(e) for e in data.get("events", []))
        times = [e.time for e in events]
        if times != sorted(times):
            raise ScenarioError("scenario events must be time-ordered")
        q0 = np.asarray(data["q0"], dtype=float) if "q0" in data else reference.start.copy()
        plant = TrackingPlant.from_json(data["plant"]) if data.get("plant") else None
        qdot0 = data.get("qdot0")
        if qdot0 is not None:
            qdot0 = np.asarray(qdot0, dtype=float)
        return ScenarioSpec(
            model,
            scene,
            reference,
            model.check_q(q0),
            cbf,
            tracker,
            float(data.get("dt", 0.01)),
            float(data.get("t_max", 10.0)),
            events,
            seed,
            data.get("name", ""),
            plant,
            qdot0,
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario is missing field {exc}") from None
    except (TypeError, ContractViolation) as exc:
        raise ScenarioError(str(exc)) from None


def scenario_to_json(spec: ScenarioSpec) -> dict:
    data = {
        "name": spec.name,
        "seed": spec.seed,
        "robot": spec.model.to_json(),
        "scene": spec.scene.to_json(),
        "reference": spec.reference.to_json(),
        "q0": np.asarray(spec.q0).tolist(),
        "dt": spec.dt,
        "t_max": spec.t_max,
        "cbf": spec.cbf.to_json(),
        "tracker": spec.tracker.to_json(),
        "events": [e.to_json() for e in spec.events],
    }
    if spec.plant is not None:
        data["plant"] = spec.plant.to_json()
    if spec.qdot0 is not None:
        data["qdot0"] = np.asarray(spec.qdot0).tolist()
    return data


def load_scenario(source) -> ScenarioSpec:
    """Load ``builtin:<name>`` or a scenario JSON file."""
    source = str(source)
    if source.startswith("builtin:"):
        return builtin_scenario(source[len("builtin:"):])
    path = Path(source)
    if not path.is_file():
        raise ScenarioError(f"scenario file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from None
    return scenario_from_json(data, path.parent)


def save_scenario(spec: ScenarioSpec, directory) -> Path:
    """Write ``scenario.json`` referencing ``robot.json``, ``scene.json`` and ``reference.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = scenario_to_json(spec)
    (directory / "robot.json").write_text(json.dumps(data.pop("robot"), indent=1))
    (directory / "scene.json").write_text(json.dumps(data.pop("scene"), indent=1))
    data.pop("reference")
    spec.reference.save(directory / "reference.csv")
    data.update(robot="robot.json", scene="scene.json", reference="reference.csv", behavior=spec.reference.behavior)
    path = directory / "scenario.json"
    path.write_text(json.dumps(data, indent=1))
    return path
