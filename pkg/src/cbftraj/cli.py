"""Command-line front end.

Every command prints one JSON object on stdout.  Exit codes:

0  success
1  invariance violated or runtime failure
2  rollout did not reach the goal
3  no usable cache entry and no fallback command
4  bad input (missing file, malformed JSON, invalid parameters)

Set ``CBFTRAJ_LOG_LEVEL`` (e.g. ``INFO``) for log output on stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import shlex
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cache import (
    CacheFormatError,
    CacheMiss,
    CachePolicy,
    TrajectoryCache,
    load_cache,
    make_filter,
    plan_or_filter,
    save_cache,
    suitability,
)
from .cbf import CbfParams
from .geometry import GeometryError
from .kinematics import ContractViolation, JointState, RobotModel, jacobian_norm_bound
from .scenarios import ScenarioError, load_scenario, save_scenario, scenario_to_json
from .scene import PlanningScene, SceneError
from .sim import invariance_report, rollout_dynamic, rollout_kinematic
from .tracker import TrackerParams, Trajectory

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_NOT_CONVERGED = 2
EXIT_NO_MATCH = 3
EXIT_BAD_INPUT = 4

LOG_ENV = "CBFTRAJ_LOG_LEVEL"

log = logging.getLogger("cbftraj")

_INPUT_ERRORS = (
    ScenarioError,
    SceneError,
    CacheFormatError,
    ContractViolation,
    GeometryError,
    FileNotFoundError,
    json.JSONDecodeError,
    KeyError,
)


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, arrays become lists."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _emit(payload: dict) -> None:
    print(json.dumps(_clean(payload), sort_keys=True))


def _fail(code: int, reason: str, **extra) -> int:
    status = {EXIT_NOT_CONVERGED: "not_converged", EXIT_NO_MATCH: "no_match", EXIT_BAD_INPUT: "bad_input"}
    _emit({"status": status.get(code, "failed"), "reason": reason, **extra})
    return code


def _canonical_hash(data: dict) -> str:
    text = json.dumps(_clean(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _versions() -> dict:
    return {"cbftraj": __version__, "numpy": np.__version__, "python": platform.python_version()}


# ---------------------------------------------------------------------------
# filter


def cmd_filter(args) -> int:
    spec = load_scenario(args.scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = scenario_to_json(spec)
    manifest = {
        "scenario": str(args.scenario),
        "name": spec.name,
        "config_hash": _canonical_hash(config),
        "seed": spec.seed,
        "versions": _versions(),
        "mode": "dynamic" if spec.plant is not None else "kinematic",
    }
    if spec.plant is None:
        res = rollout_kinematic(
            spec.model, spec.scene, spec.reference, spec.q0, spec.cbf, spec.tracker, spec.dt, spec.t_max, spec.events
        )
        trace, converged, toggles = res.trace, res.converged, res.toggle_steps
        trajectory = res.trajectory
        certificate = None
    else:
        qdot0 = spec.qdot0 if spec.qdot0 is not None else np.zeros(spec.model.n)
        dyn, certificate = rollout_dynamic(
            spec.model,
            spec.scene,
            spec.reference,
            spec.q0,
            qdot0,
            spec.plant,
            spec.cbf,
            spec.tracker,
            spec.dt,
            spec.t_max,
            events=spec.events,
        )
        trace, converged, toggles = dyn.trace, dyn.converged, dyn.toggle_steps
        trajectory = Trajectory(np.array(trace.t), np.array(trace.q), spec.reference.behavior)
    report = invariance_report(trace, toggles)
    (out / "trace.csv").write_text(trace.to_csv())
    trajectory.save(out / "trajectory.csv")
    cert = {"invariance": report}
    if certificate is not None:
        cert["comparison"] = certificate.to_json()
    (out / "certificate.json").write_text(json.dumps(_clean(cert), indent=1, sort_keys=True))

    held = report["held"] is not False
    if certificate is not None and certificate.holds is False:
        held = False
    if not held:
        code, reason = EXIT_FAILED, "invariance violated"
    elif not converged:
        code, reason = EXIT_NOT_CONVERGED, "goal not reached within t_max"
    else:
        code, reason = EXIT_OK, ""
    manifest.update(
        status={EXIT_OK: "ok", EXIT_FAILED: "failed", EXIT_NOT_CONVERGED: "not_converged"}[code],
        reason=reason,
        exit_code=code,
        converged=converged,
        steps=len(trace),
        min_h=report["min_h"],
        outputs=["trace.csv", "trajectory.csv", "certificate.json", "manifest.json"],
    )
    (out / "manifest.json").write_text(json.dumps(_clean(manifest), indent=1, sort_keys=True))
    _emit({k: manifest[k] for k in ("status", "reason", "converged", "steps", "min_h", "config_hash")})
    return code


# ---------------------------------------------------------------------------
# cache


def _load_model(path):
    return RobotModel.load(path) if path else None


def _load_state(path) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    if isinstance(data, list):
        return np.asarray(data, dtype=float)
    return np.asarray(JointState.from_json(data).q, dtype=float)


def _open_cache(args, model, create: bool = False) -> TrajectoryCache:
    path = Path(args.cache)
    if path.exists():
        return load_cache(path, model)
    if not create:
        raise FileNotFoundError(f"cache file {path} does not exist")
    return TrajectoryCache(CachePolicy(args.t1, args.t2, args.t3, args.max_entries))


def cmd_cache_query(args) -> int:
    model = _load_model(args.robot)
    cache = _open_cache(args, model)
    scene = PlanningScene.load(args.scene, model)
    q = _load_state(args.state)
    scores = [
        {"index": i, "behavior": e.behavior, "score": suitability(e, scene, q, cache.policy)}
        for i, e in enumerate(cache)
        if args.behavior is None or e.behavior == args.behavior
    ]
    _emit({"status": "ok", "scores": scores})
    return EXIT_OK


def cmd_cache_insert(args) -> int:
    model = _load_model(args.robot)
    cache = _open_cache(args, model, create=True)
    scene = PlanningScene.load(args.scene, model)
    trajectory = Trajectory.load(args.trajectory, args.behavior)
    cache.insert(args.behavior, scene, trajectory)
    save_cache(cache, args.cache)
    _emit({"status": "ok", "cache_size": len(cache)})
    return EXIT_OK


def _subprocess_planner(command: str, behavior: str, workdir: Path):
    """Planner fallback running ``command --behavior B --scene S --state Q --out O``."""

    def plan(scene: PlanningScene, q) -> Trajectory:
        scene_path = workdir / "fallback_scene.json"
        state_path = workdir / "fallback_state.json"
        out_path = workdir / "fallback_trajectory.csv"
        scene_path.write_text(json.dumps(scene.to_json()))
        state_path.write_text(json.dumps(JointState(np.asarray(q)).to_json()))
        argv = shlex.split(command) + [
            "--behavior", behavior, "--scene", str(scene_path), "--state", str(state_path), "--out", str(out_path),
        ]
        log.info("running planner fallback: %s", " ".join(argv))
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"fallback command exited with {proc.returncode}: {proc.stderr.strip()}")
        return Trajectory.load(out_path, behavior)

    return plan


def cmd_cache_run(args) -> int:
    model = RobotModel.load(args.robot)
    cache = _open_cache(args, model)
    scene = PlanningScene.load(args.scene, model)
    q = model.check_q(_load_state(args.state))
    config = json.loads(Path(args.config).read_text()) if args.config else {}
    cbf_data = dict(config.get("cbf", {}))
    if cbf_data.get("j_max") is None:
        cbf_data["j_max"] = jacobian_norm_bound(model, 256, int(config.get("seed", 0)))
    cbf = CbfParams.from_json(cbf_data)
    tracker = TrackerParams.from_json(config.get("tracker", {}))
    filter_fn = make_filter(model, cbf, tracker, float(config.get("dt", 0.01)), float(config.get("t_max", 10.0)))
    with tempfile.TemporaryDirectory() as tmp:
        fallback = _subprocess_planner(args.fallback_cmd, args.behavior, Path(tmp)) if args.fallback_cmd else None
        try:
            outcome = plan_or_filter(cache, args.behavior, scene, q, cache.policy, fallback, filter_fn)
        except CacheMiss as exc:
            return _fail(EXIT_NO_MATCH, str(exc))
    save_cache(cache, args.cache)
    if args.out:
        outcome.trajectory.save(args.out)
    _emit({"status": "ok", "cache_size": len(cache), **outcome.to_json()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    if args.iters <= 0:
        report = {}
    else:
        spec = load_scenario(args.scenario)
        steps, behaviors = [], []
        for _ in range(args.iters):
            times = []
            start = time.perf_counter()
            rollout_kinematic(
                spec.model,
                spec.scene,
                spec.reference,
                spec.q0,
                spec.cbf,
                spec.tracker,
                spec.dt,
                spec.t_max,
                spec.events,
                step_times=times,
            )
            behaviors.append(time.perf_counter() - start)
            steps.extend(times)
        ms = 1000.0 * np.array(steps)
        report = {
            "scenario": str(args.scenario),
            "iterations": args.iters,
            "steps": int(ms.size),
            "pairs": len(spec.scene._pairs),
            "step_ms": {
                "mean": float(ms.mean()),
                "p50": float(np.percentile(ms, 50)),
                "p99": float(np.percentile(ms, 99)),
            },
            "behavior_ms": {
                "mean": 1000.0 * float(np.mean(behaviors)),
                "max": 1000.0 * float(np.max(behaviors)),
            },
        }
    if args.out:
        Path(args.out).write_text(json.dumps(_clean(report), indent=1, sort_keys=True))
    _emit({"status": "ok", "report": report})
    return EXIT_OK


# ---------------------------------------------------------------------------
# scenario export


def cmd_scenario(args) -> int:
    spec = load_scenario(args.source)
    path = save_scenario(spec, args.out)
    _emit({"status": "ok", "scenario": str(path)})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbftraj", description="Safety-filter cached joint trajectories.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="run a scenario through the safety filter")
    p.add_argument("--scenario", required=True, help="scenario JSON file or builtin:<name>")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("cache", help="query, extend or use a trajectory cache")
    csub = p.add_subparsers(dest="cache_command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--cache", required=True, help="cache JSON file")
    common.add_argument("--scene", required=True, help="scene JSON file")
    common.add_argument("--robot", help="robot JSON file (supplies robot bodies when the scene has none)")

    q = csub.add_parser("query", parents=[common], help="print suitability scores")
    q.add_argument("--behavior")
    q.add_argument("--state", required=True, help="JSON with the joint positions")
    q.set_defaults(func=cmd_cache_query)

    q = csub.add_parser("insert", parents=[common], help="add a trajectory")
    q.add_argument("--behavior", required=True)
    q.add_argument("--trajectory", required=True, help="trajectory CSV or JSON")
    q.add_argument("--t1", type=float, default=CachePolicy.t1, help="policy for a new cache file")
    q.add_argument("--t2", type=float, default=CachePolicy.t2)
    q.add_argument("--t3", type=float, default=CachePolicy.t3)
    q.add_argument("--max-entries", type=int, default=CachePolicy.max_entries)
    q.set_defaults(func=cmd_cache_insert)

    q = csub.add_parser("run", parents=[common], help="filter the best cached trajectory or re-plan")
    q.add_argument("--behavior", required=True)
    q.add_argument("--state", required=True)
    q.add_argument("--config", help="JSON with cbf, tracker, dt and t_max blocks")
    q.add_argument("--fallback-cmd", help="planner command; receives --behavior --scene --state --out")
    q.add_argument("--out", help="write the resulting trajectory here")
    q.set_defaults(func=cmd_cache_run)

    p = sub.add_parser("bench", help="time filter steps and whole behaviors")
    p.add_argument("--scenario", required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scenario", help="write a scenario (e.g. a builtin) as files")
    p.add_argument("source", help="builtin:<name> or scenario file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get(LOG_ENV, "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        return _fail(EXIT_BAD_INPUT, f"{type(exc).__name__}: {exc}")
    except (RuntimeError, ValueError) as exc:
        log.exception("command failed")
        return _fail(EXIT_FAILED, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
