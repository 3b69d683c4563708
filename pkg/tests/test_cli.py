import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from cbftraj.cli import main
from cbftraj.scenarios import example1_scenario, load_scenario, save_scenario
from cbftraj.tracker import Trajectory


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    lines = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(lines[-1])


@pytest.fixture(scope="module")
def example_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("example1")
    save_scenario(example1_scenario(), out)
    return out


def test_free_scenario_exits_zero(tmp_path, capsys):
    code, payload = run_cli(capsys, "filter", "--scenario", "builtin:free", "--out", tmp_path)
    assert code == 0 and payload["status"] == "ok"
    out = Trajectory.load(tmp_path / "trajectory.csv")
    ref = load_scenario("builtin:free").reference
    assert np.linalg.norm(out.goal - ref.goal) < 0.05


def test_example1_filter_writes_outputs(tmp_path, capsys, example_dir):
    code, payload = run_cli(capsys, "filter", "--scenario", example_dir / "scenario.json", "--out", tmp_path)
    assert code == 0
    assert payload["min_h"] >= 0.0
    for name in ("trace.csv", "trajectory.csv", "certificate.json", "manifest.json"):
        assert (tmp_path / name).exists()
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and manifest["converged"]
    assert len(manifest["config_hash"]) == 64
    assert "numpy" in manifest["versions"]
    header = (tmp_path / "trace.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t" and header[-4:] == ["h_min", "nearest_pair", "qp_status", "event"]


def test_blocked_goal_exits_two_with_partial_trace(tmp_path, capsys):
    code, payload = run_cli(capsys, "filter", "--scenario", "builtin:blocked", "--out", tmp_path)
    assert code == 2
    assert payload["status"] == "not_converged"
    assert len((tmp_path / "trace.csv").read_text().splitlines()) > 2


def test_reruns_are_byte_identical(tmp_path, capsys, example_dir):
    for name in ("a", "b"):
        run_cli(capsys, "filter", "--scenario", example_dir / "scenario.json", "--out", tmp_path / name)
    for name in ("trace.csv", "trajectory.csv", "certificate.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dynamic_scenario_reports_comparison_certificate(tmp_path, capsys):
    code, _ = run_cli(capsys, "filter", "--scenario", "builtin:certificate-3", "--out", tmp_path)
    cert = json.loads((tmp_path / "certificate.json").read_text())
    assert cert["comparison"]["s_m_member"] is True
    assert cert["comparison"]["holds"] is True
    assert code in (0, 2)


def test_missing_scenario_is_bad_input(tmp_path, capsys):
    code, payload = run_cli(capsys, "filter", "--scenario", tmp_path / "nope.json", "--out", tmp_path / "o")
    assert code == 4
    assert payload["status"] == "bad_input"


def test_unknown_builtin_is_bad_input(tmp_path, capsys):
    code, _ = run_cli(capsys, "filter", "--scenario", "builtin:mars", "--out", tmp_path)
    assert code == 4


# -- cache ------------------------------------------------------------------


def write_state(path, q):
    path.write_text(json.dumps({"q": list(map(float, q))}))
    return path


def moved_scene(example_dir, tmp_path, dx):
    data = json.loads((example_dir / "scene.json").read_text())
    data["obstacles"][0]["pose"]["xyz"][0] += dx
    path = tmp_path / "moved_scene.json"
    path.write_text(json.dumps(data))
    return path


STUB_PLANNER = textwrap.dedent(
    """
    import argparse, json
    p = argparse.ArgumentParser()
    for flag in ("--behavior", "--scene", "--state", "--out"):
        p.add_argument(flag)
    a = p.parse_args()
    q = json.load(open(a.state))["q"]
    rows = ["t," + ",".join(f"q{i+1}" for i in range(len(q)))]
    rows.append("0.0," + ",".join(repr(x) for x in q))
    rows.append("1.0," + ",".join(repr(x + 0.1) for x in q))
    open(a.out, "w").write("\\n".join(rows) + "\\n")
    """
)


@pytest.fixture
def populated_cache(tmp_path, capsys, example_dir):
    cache = tmp_path / "cache.json"
    common = ["--cache", cache, "--scene", example_dir / "scene.json", "--robot", example_dir / "robot.json"]
    code, payload = run_cli(capsys, "cache", "insert", *common, "--behavior", "reach", "--trajectory", example_dir / "reference.csv")
    assert code == 0 and payload["cache_size"] == 1
    return cache


def test_query_identical_scene_scores_zero(tmp_path, capsys, example_dir, populated_cache):
    state = write_state(tmp_path / "q.json", example1_scenario().q0)
    code, payload = run_cli(
        capsys, "cache", "query", "--cache", populated_cache, "--scene", example_dir / "scene.json",
        "--robot", example_dir / "robot.json", "--state", state,
    )
    assert code == 0
    assert payload["scores"] == [{"index": 0, "behavior": "reach", "score": 0.0}]


def test_run_with_dissimilar_scene_uses_fallback(tmp_path, capsys, example_dir, populated_cache):
    script = tmp_path / "planner.py"
    script.write_text(STUB_PLANNER)
    state = write_state(tmp_path / "q.json", example1_scenario().q0)
    scene = moved_scene(example_dir, tmp_path, 5.0)
    argv = [
        "cache", "run", "--cache", populated_cache, "--scene", scene, "--robot", example_dir / "robot.json",
        "--state", state, "--behavior", "reach", "--fallback-cmd", f"{sys.executable} {script}",
        "--out", tmp_path / "out.csv",
    ]
    code, payload = run_cli(capsys, *argv)
    assert code == 0
    assert payload["decision"] == "replanned"
    assert payload["cache_size"] == 2
    assert Trajectory.load(tmp_path / "out.csv").positions.shape == (2, 6)


def test_run_twice_gives_identical_output(tmp_path, capsys, example_dir, populated_cache):
    state = write_state(tmp_path / "q.json", example1_scenario().q0 + 0.1)
    argv = [
        "cache", "run", "--cache", populated_cache, "--scene", example_dir / "scene.json",
        "--robot", example_dir / "robot.json", "--state", state, "--behavior", "reach",
        "--config", example_dir / "scenario.json", "--out",
    ]
    code1, p1 = run_cli(capsys, *argv, tmp_path / "a.csv")
    code2, p2 = run_cli(capsys, *argv, tmp_path / "b.csv")
    assert code1 == code2 == 0
    assert p1["decision"] == p2["decision"] == "filtered"
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_run_without_match_or_fallback_exits_three(tmp_path, capsys, example_dir, populated_cache):
    state = write_state(tmp_path / "q.json", example1_scenario().q0)
    code, payload = run_cli(
        capsys, "cache", "run", "--cache", populated_cache, "--scene", example_dir / "scene.json",
        "--robot", example_dir / "robot.json", "--state", state, "--behavior", "place",
    )
    assert code == 3
    assert payload["status"] == "no_match"


def test_failing_fallback_exits_one(tmp_path, capsys, example_dir, populated_cache):
    state = write_state(tmp_path / "q.json", example1_scenario().q0)
    code, _ = run_cli(
        capsys, "cache", "run", "--cache", populated_cache, "--scene", example_dir / "scene.json",
        "--robot", example_dir / "robot.json", "--state", state, "--behavior", "place",
        "--fallback-cmd", f"{sys.executable} -c 'raise SystemExit(7)'",
    )
    assert code == 1


def test_corrupt_cache_is_bad_input(tmp_path, capsys, example_dir):
    cache = tmp_path / "cache.json"
    cache.write_text("{}")
    state = write_state(tmp_path / "q.json", example1_scenario().q0)
    code, _ = run_cli(capsys, "cache", "query", "--cache", cache, "--scene", example_dir / "scene.json", "--state", state)
    assert code == 4


# -- bench and export ------------------------------------------------------


def test_bench_zero_iterations_is_empty(tmp_path, capsys):
    code, payload = run_cli(capsys, "bench", "--scenario", "builtin:example1", "--iters", 0, "--out", tmp_path / "r.json")
    assert code == 0 and payload["report"] == {}
    assert json.loads((tmp_path / "r.json").read_text()) == {}


def test_bench_reports_latency(capsys):
    code, payload = run_cli(capsys, "bench", "--scenario", "builtin:example1", "--iters", 1)
    report = payload["report"]
    assert code == 0
    assert report["steps"] > 0
    assert report["step_ms"]["p50"] <= report["step_ms"]["p99"]
    # One pair: per-step cost is far below a millisecond on a desktop.
    assert report["step_ms"]["mean"] < 1.0


def test_scenario_export_round_trips(tmp_path, capsys):
    code, payload = run_cli(capsys, "scenario", "builtin:kitchen", "--out", tmp_path)
    assert code == 0
    spec = load_scenario(payload["scenario"])
    assert spec.scene == load_scenario("builtin:kitchen").scene


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "cbftraj.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("cbftraj")
