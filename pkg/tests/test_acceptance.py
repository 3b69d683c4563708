"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines are
written straight to the terminal even when output capture is on).
"""
import time
from itertools import combinations

import numpy as np
import pytest

from cbftraj.cache import CachePolicy, Decision, TrajectoryCache, plan_or_filter
from cbftraj.cbf import CbfParams, LinearConstraint, filter_velocity
from cbftraj.geometry import Box, Capsule, ConvexHull, Pose, Sphere, signed_distance
from cbftraj.scenarios import certificate_scenario, example1_scenario, kitchen_scenario, random_scenario
from cbftraj.scene import Obstacle, PairQuery, PlanningScene, min_signed_distance
from cbftraj.sim import (
    INVARIANCE_TOL,
    comparison_bound,
    gradient_disturbance_probe,
    invariance_report,
    rollout_dynamic,
    rollout_kinematic,
)
from cbftraj.tracker import Trajectory

from oracles import (
    enumerate_projection,
    exact_rounded_segment_distance,
    maxmin_signed_distance,
    random_rotation,
)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        assert ok, detail

    return emit


def kinematic(spec, **kwargs):
    return rollout_kinematic(
        spec.model, spec.scene, spec.reference, spec.q0, spec.cbf, spec.tracker, spec.dt, spec.t_max, spec.events, **kwargs
    )


# ---------------------------------------------------------------------------


def test_criterion_1_forward_invariance(report):
    start = time.perf_counter()
    failures, applicable, moved, dofs, obstacles = [], 0, 0, set(), []
    for seed in range(20):
        spec = random_scenario(seed)
        assert spec.cbf.robust_margin and spec.dt == 0.01
        out = kinematic(spec)
        inv = invariance_report(out.trace, out.toggle_steps)
        dofs.add(spec.model.n)
        obstacles.append(len(spec.scene.obstacles))
        path = float(np.linalg.norm(np.diff(out.trajectory.positions, axis=0), axis=1).sum())
        moved += path > 0.05
        if inv["applies"]:
            applicable += 1
            if not inv["held"]:
                failures.append((seed, inv["min_h"]))
    elapsed = time.perf_counter() - start
    ok = not failures and applicable == 20 and elapsed < 120.0
    detail = (
        f"{applicable}/20 runs start safe, violations {failures}, {moved}/20 robots moved, "
        f"DOF {sorted(dofs)}, obstacles {min(obstacles)}-{max(obstacles)}, {elapsed:.1f}s"
    )
    report(1, "forward invariance", ok, detail)


def test_criterion_2_example1(report):
    start = time.perf_counter()
    spec = example1_scenario()
    out = kinematic(spec)
    elapsed = time.perf_counter() - start
    min_h = float(out.trace.h.min())
    ref_h = min(min_signed_distance(spec.scene, spec.model, q)[0] for q in spec.reference.positions)
    # Deflection: the reference passes through the ball, the filtered path does not.
    deflected = ref_h < 0.0 <= min_h + INVARIANCE_TOL
    ok = out.converged and min_h >= -INVARIANCE_TOL and deflected and elapsed < 5.0
    detail = f"converged={out.converged}, min h={min_h:.3e}, reference min h={ref_h:.3f}, {elapsed:.2f}s"
    report(2, "single-ball deflection", ok, detail)


def test_criterion_3_comparison_certificate(report):
    start = time.perf_counter()
    rows, bad = [], []
    for seed in range(10):
        factor = (2, 4, 8)[seed % 3]
        spec = certificate_scenario(seed, lam_factor=factor)
        out, cert = rollout_dynamic(
            spec.model, spec.scene, spec.reference, spec.q0, spec.qdot0, spec.plant,
            spec.cbf, spec.tracker, spec.dt, spec.t_max,
        )
        t = np.array(out.trace.t)
        y = comparison_bound(t, cert.h0, spec.cbf.alpha, spec.plant.lam, cert.c_h, spec.plant.m_const, cert.e0_norm)
        keep = np.ones(len(t), dtype=bool)
        keep[out.toggle_steps] = False
        gap = float((out.trace.h - y)[keep].min())
        rows.append(gap)
        if not (cert.s_m_member and cert.e0_norm > 0 and gap >= -INVARIANCE_TOL):
            bad.append((seed, cert.s_m_member, gap))
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 60.0
    detail = f"10 rollouts in S_M, worst h - y = {min(rows):.3e}, failures {bad}, {elapsed:.1f}s"
    report(3, "full-order certificate", ok, detail)


def test_criterion_4_gradient_bounds(report):
    start = time.perf_counter()
    worst_grad_ratio, worst_delta_ratio, samples, bad = 0.0, 0.0, 0, []
    for seed in range(10):
        spec = random_scenario(seed, n_obstacles=6)
        bodies = spec.scene.robot_bodies
        scene = PlanningScene.build(spec.scene.obstacles, bodies, [(a.name, b.name) for a, b in combinations(bodies, 2)])
        rng = np.random.default_rng(100 + seed)
        q = rng.uniform(spec.model.lower, spec.model.upper, (100, spec.model.n))
        stats = gradient_disturbance_probe(spec.model, scene, q, spec.cbf.j_max)
        samples += len(stats.grad_norms)
        worst_grad_ratio = max(worst_grad_ratio, stats.max_grad / stats.j_max)
        worst_delta_ratio = max(worst_delta_ratio, stats.max_delta / stats.j_max)
        if not (stats.grad_bound_ok and stats.delta_bound_ok):
            bad.append(seed)
    elapsed = time.perf_counter() - start
    ok = not bad and samples == 1000 and elapsed < 60.0
    detail = (
        f"{samples} samples, max |dh/dq|/J_max = {worst_grad_ratio:.3f}, "
        f"max |delta|/J_max = {worst_delta_ratio:.2e}, failing seeds {bad}, {elapsed:.1f}s"
    )
    report(4, "gradient and disturbance bounds", ok, detail)


def test_criterion_5_qp_oracle(report):
    rng = np.random.default_rng(2024)
    params = CbfParams(q_dot_max=1e6, robust_margin=False)
    pair = PairQuery("environment", "a", "b")
    worst, infeasible = 0.0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(0, 9))
        A = rng.normal(size=(m, n))
        b = A @ rng.normal(size=n) - rng.exponential(0.5, size=m)
        v_des = rng.normal(size=n) * 2.0
        v, diag = filter_velocity(v_des, [LinearConstraint(A[i], float(b[i]), pair) for i in range(m)], params)
        infeasible += not diag.feasible
        ref = enumerate_projection(v_des, A, b)
        worst = max(worst, abs(float(np.sum((v - v_des) ** 2)) - ref[0]))
    worst_single = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        a, b, v_des = rng.normal(size=n), float(rng.normal()), rng.normal(size=n)
        v, _ = filter_velocity(v_des, [LinearConstraint(a, b, pair)], params)
        closed = v_des + max(0.0, b - a @ v_des) / (a @ a) * a
        worst_single = max(worst_single, float(np.abs(v - closed).max()))
    ok = worst <= 1e-6 and worst_single <= 1e-9 and infeasible == 0
    detail = f"1000 instances, worst objective gap {worst:.2e}; single-constraint worst error {worst_single:.2e}"
    report(5, "QP oracle equivalence", ok, detail)


def _random_shape(rng):
    kind = rng.integers(4)
    if kind == 0:
        return Sphere(rng.uniform(0.05, 0.5))
    if kind == 1:
        return Capsule(rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.3))
    if kind == 2:
        return Box(rng.uniform(0.05, 0.5, 3))
    return ConvexHull(rng.normal(size=(8, 3)) * 0.4)


def test_criterion_6_distance_kernel(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    worst, overlapping = 0.0, 0
    for _ in range(500):
        a, b = _random_shape(rng), _random_shape(rng)
        pa = Pose(random_rotation(rng), rng.uniform(-0.8, 0.8, 3))
        pb = Pose(random_rotation(rng), rng.uniform(-0.8, 0.8, 3))
        sd = signed_distance(a, pa, b, pb).signed_distance
        ref = maxmin_signed_distance(pa.apply(a.core_vertices()), a.margin, pb.apply(b.core_vertices()), b.margin)
        overlapping += ref < 0
        worst = max(worst, abs(sd - ref))
    worst_closed = 0.0
    for _ in range(500):
        a = (Sphere(rng.uniform(0.05, 0.4)), Capsule(rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.3)))[rng.integers(2)]
        b = (Sphere(rng.uniform(0.05, 0.4)), Capsule(rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.3)))[rng.integers(2)]
        pa = Pose(random_rotation(rng), rng.uniform(-0.6, 0.6, 3))
        pb = Pose(random_rotation(rng), rng.uniform(-0.6, 0.6, 3))
        sd = signed_distance(a, pa, b, pb).signed_distance
        exact = exact_rounded_segment_distance(pa.apply(a.core_vertices()), a.margin, pb.apply(b.core_vertices()), b.margin)
        worst_closed = max(worst_closed, abs(sd - exact))
    elapsed = time.perf_counter() - start
    ok = worst <= 2e-3 and worst_closed <= 1e-9
    detail = (
        f"500 pairs ({overlapping} overlapping), worst |sd - oracle| {worst:.2e}; "
        f"500 sphere/capsule pairs, worst {worst_closed:.2e}; {elapsed:.1f}s"
    )
    report(6, "distance kernel oracle", ok, detail)


# -- criterion 7: scripted cache ledger -------------------------------------

GOAL = np.array([1.0, 1.0])


def _scene(offset=0.0):
    return PlanningScene.build([Obstacle("o", Sphere(0.1), Pose.from_xyz_rpy((1.0 + offset, 0.0, 0.0)))])


def _path(q, behavior):
    return Trajectory.from_waypoints([np.asarray(q, dtype=float), GOAL], 1.0, behavior)


def _filter(reference, scene, q):
    # A start with negative second joint stands for a filter run that cannot reach the goal.
    return _path(q, reference.behavior), bool(q[1] >= 0.0)


# behavior, q, obstacle offset, expected decision, cache size after, probes, chosen
LEDGER = [
    ("pick", (0.0, 0.0), 0.0, Decision.REPLANNED, 1, 0, None),
    ("pick", (0.0, 0.0), 0.0, Decision.EARLY_HIT, 1, 1, 0),
    ("pick", (0.3, 0.0), 0.0, Decision.FILTERED, 1, 1, 0),
    ("pick", (0.8, 0.0), 0.0, Decision.FILTERED_AND_CACHED, 2, 1, 0),
    ("pick", (0.8, 0.0), 0.0, Decision.EARLY_HIT, 2, 2, 1),
    ("pick", (0.0, 0.0), 3.0, Decision.REPLANNED, 3, 2, 0),
    ("pick", (0.0, 0.0), 3.0, Decision.EARLY_HIT, 3, 3, 2),
    ("place", (0.0, 0.0), 0.0, Decision.REPLANNED, 4, 0, None),
    ("pick", (0.0, 0.01), 0.0, Decision.EARLY_HIT, 4, 1, 0),
    ("pick", (0.4, 0.0), 1.5, Decision.FILTERED_AND_CACHED, 5, 3, 0),
    ("pick", (0.0, -0.2), 0.0, Decision.REPLANNED, 6, 4, 0),
    ("place", (0.0, 0.0), 0.0, Decision.EARLY_HIT, 6, 1, 3),
]


def test_criterion_7_cache_ledger(report):
    cache = TrajectoryCache(CachePolicy(t1=0.05, t2=0.5, t3=2.0), clock=lambda: 0.0)
    planner_calls = []

    def planner(scene, q):
        planner_calls.append(q.copy())
        return _path(q, "planned")

    got, mismatches = [], []
    for k, (behavior, q, offset, decision, size, probes, chosen) in enumerate(LEDGER):
        out = plan_or_filter(cache, behavior, _scene(offset), np.array(q), planner_fallback=planner, filter_fn=_filter)
        got.append(out.decision)
        if (out.decision, len(cache), out.probes, out.chosen) != (decision, size, probes, chosen):
            mismatches.append((k, out.decision, len(cache), out.probes, out.chosen))
    branches = set(got)
    ok = not mismatches and len(branches) == 4 and len(planner_calls) == 4
    detail = f"decisions {[d for d in got]}, mismatches {mismatches}, planner calls {len(planner_calls)}"
    report(7, "cache decision ledger", ok, detail)


def test_criterion_8_latency(report):
    spec = kitchen_scenario()
    kinematic(spec)  # warm-up
    step_times, behaviors = [], []
    for _ in range(3):
        times = []
        start = time.perf_counter()
        out = kinematic(spec, step_times=times)
        behaviors.append(time.perf_counter() - start)
        step_times.extend(times)
    mean_ms = 1000.0 * float(np.mean(step_times))
    behavior_ms = 1000.0 * max(behaviors)
    ok = len(spec.scene.obstacles) == 36 and out.converged and mean_ms < 10.0 and behavior_ms < 1000.0
    detail = (
        f"36-obstacle scene, {len(out.trace)} steps, mean step {mean_ms:.2f} ms, "
        f"p99 {1000.0 * float(np.percentile(step_times, 99)):.2f} ms, slowest behavior {behavior_ms:.0f} ms"
    )
    report(8, "latency (informational)", ok, detail)


def test_criterion_9_determinism(report):
    makers = {
        "example1": example1_scenario,
        "kitchen": kitchen_scenario,
        "random-0": lambda: random_scenario(0),
        "random-7": lambda: random_scenario(7),
        "certificate-1": lambda: certificate_scenario(1),
    }
    differing = []
    for name, make in makers.items():
        traces = []
        for _ in range(2):
            spec = make()
            if spec.plant is not None:
                out, _ = rollout_dynamic(
                    spec.model, spec.scene, spec.reference, spec.q0, spec.qdot0, spec.plant,
                    spec.cbf, spec.tracker, spec.dt, spec.t_max,
                )
            else:
                out = kinematic(spec)
            traces.append(out.trace.to_csv().encode())
        if traces[0] != traces[1]:
            differing.append(name)
    ok = not differing
    report(9, "determinism", ok, f"{len(makers)} scenarios rerun, differing traces: {differing}")
