import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from eventloc import cli
from eventloc.events import EventStream, save_events
from eventloc.geometry import PoseSE3, load_poses, save_cloud, save_poses
from eventloc.synthetic import default_intrinsics
from tiny import TINY


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    assert cli.main(["synth", "--config", str(d / "tiny.yaml"), "--out", str(d / "data")]) == 0
    assert cli.main(["train", "--config", str(d / "tiny.yaml"), "--data", str(d / "data"), "--out", str(d / "m.npz"),
                     "--quiet"]) == 0
    return d


def test_pipeline(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "eval", "--config", d / "tiny.yaml", "--data", d / "data", "--checkpoint", d / "m.npz",
                       "--out", d / "rep" / "test")
    assert code == 0
    summary = json.loads(out)
    report = json.loads((d / "rep" / "test.json").read_text())
    assert summary["epe_mean"] == report["aggregate"]["epe"]["mean"]
    code, out, _ = run(capsys, "eval", "--config", d / "tiny.yaml", "--data", d / "data", "--gt-flow",
                       "--out", d / "rep" / "gt")
    assert code == 0 and json.loads((d / "rep" / "gt.json").read_text())["flow_source"] == "ground_truth"


def test_set_override(workdir, capsys):
    d = workdir
    code, _, _ = run(capsys, "eval", "--config", d / "tiny.yaml", "--set", "eval.iters=2", "--data", d / "data",
                     "--checkpoint", d / "m.npz", "--out", d / "rep" / "two")
    assert code == 0 and json.loads((d / "rep" / "two.json").read_text())["iters"] == 2


def test_viz(workdir, capsys):
    d = workdir
    code, out, _ = run(capsys, "viz", "--config", d / "tiny.yaml", "--data", d / "data", "--checkpoint", d / "m.npz",
                       "--sample", "sample_0000", "--out", d / "viz")
    assert code == 0
    files = json.loads(out)["files"]
    assert {"flow.ppm", "edge.pgm", "overlay_pred.ppm", "iter_01.ppm", "iter_03.ppm"} <= set(files)
    for f in files:
        assert (d / "viz" / f).read_bytes()[:2] in (b"P5", b"P6")


def test_infer(workdir, capsys):
    d = workdir
    sample = d / "data" / "sample_0001"
    T_gt, T_init = load_poses(sample / "poses.txt")
    save_poses(d / "init.txt", [T_init])
    code, out, err = run(capsys, "infer", "--config", d / "tiny.yaml", "--checkpoint", d / "m.npz",
                         "--cloud", d / "data" / "scene_000" / "cloud.pc", "--events", sample / "events.evt",
                         "--intrinsics", sample / "intrinsics.txt", "--init-pose", d / "init.txt",
                         "--out", d / "infer")
    assert code == 0, err
    assert load_poses(d / "infer" / "pose.txt")[0].is_valid()
    assert (d / "infer" / "flow.flo").read_bytes()[:4] == b"PIEH"


@pytest.mark.parametrize("argv, code", [
    (["frobnicate"], "E_USAGE"),
    (["train", "--data", "x"], "E_USAGE"),
    (["synth", "--set", "trian.steps=3", "--out", "{d}/o"], "E_CONFIG"),
    (["synth", "--set", "data.width=100", "--out", "{d}/o"], "E_CONFIG"),
    (["synth", "--set", "nokey", "--out", "{d}/o"], "E_CONFIG"),
    (["synth", "--config", "{d}/missing.yaml", "--out", "{d}/o"], "E_IO"),
    (["train", "--data", "{d}/nothing", "--out", "{d}/x.npz"], "E_DATA"),
    (["eval", "--config", "{d}/tiny.yaml", "--data", "{d}/data", "--out", "{d}/r"], "E_USAGE"),
    (["eval", "--config", "{d}/tiny.yaml", "--set", "model.hidden=4", "--data", "{d}/data",
      "--checkpoint", "{d}/m.npz", "--out", "{d}/r"], "E_MISMATCH"),
    (["eval", "--config", "{d}/tiny.yaml", "--data", "{d}/data", "--checkpoint", "{d}/tiny.yaml",
      "--out", "{d}/r"], "E_CHECKPOINT"),
    (["viz", "--config", "{d}/tiny.yaml", "--data", "{d}/data", "--checkpoint", "{d}/m.npz",
      "--sample", "nope", "--out", "{d}/v"], "E_DATA"),
])
def test_error_lines(workdir, capsys, argv, code):
    rc, out, err = run(capsys, *[a.format(d=workdir) for a in argv])
    assert rc == cli.EXIT_CODES[code]
    line = error_of(err)
    assert line["error"] == code and line["message"]
    assert "\n" not in err.strip()


def test_shape_and_pose_errors(workdir, capsys, tmp_path):
    d = workdir
    K = default_intrinsics(64, 40)
    (tmp_path / "k.txt").write_text(K.to_text())
    save_events(tmp_path / "e.evt", EventStream.empty(64, 40))
    save_poses(tmp_path / "p.txt", [PoseSE3.identity()])
    save_cloud(tmp_path / "c.pc", np.array([[0.0, 0.0, 2.0]]))
    base = ["infer", "--config", d / "tiny.yaml", "--checkpoint", d / "m.npz", "--cloud", tmp_path / "c.pc",
            "--events", tmp_path / "e.evt", "--init-pose", tmp_path / "p.txt", "--window", "0", "100",
            "--out", tmp_path / "o"]
    rc, _, err = run(capsys, *base, "--intrinsics", tmp_path / "k.txt")
    assert rc == cli.EXIT_CODES["E_SHAPE"] and "pad" in error_of(err)["message"]
    (tmp_path / "k.txt").write_text(default_intrinsics(64, 48).to_text())
    rc, _, err = run(capsys, *base, "--intrinsics", tmp_path / "k.txt")
    assert rc == cli.EXIT_CODES["E_POSE"] and error_of(err)["message"].startswith("pose unrecoverable")


def test_diverged_exit_code(workdir, capsys, monkeypatch):
    from eventloc.train import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("non-finite loss at step 0")

    monkeypatch.setattr(cli, "train", boom)
    rc, _, err = run(capsys, "train", "--config", workdir / "tiny.yaml", "--data", workdir / "data",
                     "--out", workdir / "z.npz")
    assert rc == cli.EXIT_CODES["E_DIVERGED"] and error_of(err)["error"] == "E_DIVERGED"


def test_module_entry_point(workdir):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    p = subprocess.run([sys.executable, "-m", "eventloc.cli", "eval", "--data", str(workdir / "data"),
                        "--out", str(workdir / "r")], capture_output=True, text=True, env=env)
    assert p.returncode == 2 and json.loads(p.stderr)["error"] == "E_USAGE"
