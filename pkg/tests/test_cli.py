import json
import subprocess
import sys

import numpy as np
import pytest

from facialflow.cli import run
from facialflow.fixture import FIXTURE_FILES, build_fixture, copy_fixture
from facialflow.flow import load_flow, load_visualization
from facialflow.morphable_model import load_params


@pytest.fixture
def fx(tmp_path):
    return copy_fixture(tmp_path / "fixture")


def listing(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


def test_bundled_fixture_matches_generator(tmp_path, fx):
    fresh = build_fixture(tmp_path / "fresh")
    for name in FIXTURE_FILES:
        assert (fx / name).read_bytes() == (fresh / name).read_bytes(), name


def test_fixture_subcommand(tmp_path):
    assert run(["fixture", "--out", str(tmp_path / "f")]) == 0
    assert sorted(p.name for p in (tmp_path / "f").iterdir()) == sorted(FIXTURE_FILES)


def test_interp_two_steps_reproduces_inputs(tmp_path, fx):
    out = tmp_path / "interp"
    assert run(["interp", "--src", str(fx / "source.json"), "--dst", str(fx / "target.json"),
                "--out", str(out), "--steps", "2"]) == 0
    assert listing(out) == ["params_000.json", "params_001.json", "thetas.json"]
    src, dst = load_params(fx / "source.json"), load_params(fx / "target.json")
    assert np.array_equal(load_params(out / "params_000.json").to_vector(), src.to_vector())
    assert np.array_equal(load_params(out / "params_001.json").to_vector(), dst.to_vector())
    assert json.loads((out / "thetas.json").read_text()) == [1.0, 0.0]


def test_interp_single_theta(tmp_path, fx):
    out = tmp_path / "mid.json"
    assert run(["interp", "--src", str(fx / "source.json"), "--dst", str(fx / "source.json"),
                "--out", str(out), "--theta", "0.3"]) == 0
    np.testing.assert_allclose(load_params(out).to_vector(),
                               load_params(fx / "source.json").to_vector(), rtol=1e-15)


def test_flow_between_identical_params_is_uniform_grey(tmp_path, fx):
    out = tmp_path / "flow.f3f"
    assert run(["flow", "--model", str(fx / "basis.f3b"), "--src", str(fx / "source.json"),
                "--dst", str(fx / "source.json"), "--out", str(out)]) == 0
    rgb, s_max = load_visualization(out.with_suffix(".png"))
    assert rgb.shape == (128, 128, 3) and np.all(rgb == 128) and s_max == 0.0
    flow = load_flow(out)
    assert flow.width == flow.height == 128 and not np.any(flow.data)


def test_fit_writes_params_and_report(tmp_path, fx):
    out = tmp_path / "fit.json"
    assert run(["fit", "--model", str(fx / "basis.f3b"), "--src", str(fx / "landmarks.json"),
                "--out", str(out)]) == 0
    report = json.loads((tmp_path / "fit.report.json").read_text())
    assert report["mean_landmark_error_px"] < 0.5
    assert report["iterations_used"] <= 2000
    load_params(out)


def test_render_and_perturb(tmp_path, fx):
    obj = tmp_path / "face.obj"
    assert run(["render", "--model", str(fx / "basis.f3b"), "--src", str(fx / "source.json"),
                "--out", str(obj)]) == 0
    lines = obj.read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 500
    assert sum(l.startswith("f ") for l in lines) == 912
    args = ["perturb", "--src", str(fx / "source.json"), "--std", "0.1", "--seed", "3"]
    assert run(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert run(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_animate(tmp_path, fx):
    out = tmp_path / "anim"
    assert run(["animate", "--model", str(fx / "basis.f3b"), "--src", str(fx / "source.json"),
                "--dst", str(fx / "target.json"), "--out", str(out), "--steps", "3",
                "--size", "64"]) == 0
    assert listing(out) == ["flow_000.f3f", "flow_000.png", "flow_001.f3f", "flow_001.png",
                            "flow_002.f3f", "flow_002.png", "thetas.json"]
    assert load_flow(out / "flow_002.f3f").width == 64


def test_missing_input_exits_2(tmp_path, fx, capsys):
    out = tmp_path / "out"
    assert run(["flow", "--model", str(fx / "basis.f3b"), "--src", str(tmp_path / "nope.json"),
                "--dst", str(fx / "target.json"), "--out", str(out / "f.f3f")]) == 2
    assert "not found" in capsys.readouterr().err
    assert not out.exists()


def test_usage_error_exits_2():
    assert run(["interp", "--src", "a.json"]) == 2
    assert run(["bogus"]) == 2


def test_malformed_input_exits_3(tmp_path, fx):
    bad = tmp_path / "bad.f3b"
    bad.write_bytes(b"F3B1garbage")
    assert run(["render", "--model", str(bad), "--src", str(fx / "source.json"),
                "--out", str(tmp_path / "x.obj")]) == 3
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["perturb", "--src", str(tmp_path / "bad.json"), "--out", str(tmp_path / "y.json")]) == 3
    assert not (tmp_path / "x.obj").exists() and not (tmp_path / "y.json").exists()


def test_invalid_values_exit_1_without_outputs(tmp_path, fx):
    out = tmp_path / "o"
    base = ["--src", str(fx / "source.json"), "--dst", str(fx / "target.json")]
    assert run(["interp", *base, "--out", str(out), "--steps", "1"]) == 1
    assert run(["interp", *base, "--out", str(out / "p.json"), "--theta", "1.5"]) == 1
    assert run(["animate", "--model", str(fx / "basis.f3b"), *base, "--out", str(out),
                "--steps", "1"]) == 1
    assert run(["flow", "--model", str(fx / "basis.f3b"), *base, "--out", str(out / "f.f3f"),
                "--size", "0"]) == 1
    assert run(["perturb", "--src", str(fx / "source.json"), "--out", str(out / "n.json"),
                "--std", "-1"]) == 1
    assert not out.exists()


def test_help_lists_exit_codes():
    proc = subprocess.run([sys.executable, "-m", "facialflow.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "exit codes" in proc.stdout and "4 optimization failure" in proc.stdout
