import os
import subprocess
import sys

import numpy as np
import pytest

from tooldet.cli import main, read_detections
from tooldet.trainer import load_checkpoint

TINY_CFG = """
[scene]
width = 96
height = 96
length = 3
n_tools = 1
shaft_length = 30, 40
shaft_width = 8, 10
wrist_radius = 6, 8
min_visible_pixels = 40

[data]
n_sequences = 3
n_test = 1

[model]
backbone_channels = 4, 4, 6, 6, 6
rpn_width = 8
fc_width = 8
fusion_width = 8
roi_size = 2
post_nms_top_n_train = 40
post_nms_top_n_test = 20

[train]
iterations = 3
rpn_batch = 32
roi_batch = 8
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in list(os.environ):
        if name.startswith("TOOLDET_"):
            monkeypatch.delenv(name)
    (tmp_path / "tiny.cfg").write_text(TINY_CFG)
    return tmp_path


def run(command, *args):
    return main([command, "--config", "tiny.cfg", *args])


def test_smoke_pipeline(workdir, capsys):
    for cmd in ("generate", "flow", "train", "detect", "eval"):
        assert run(cmd) == 0, cmd
    assert (workdir / "data" / "flow_gt").is_dir() and any((workdir / "data" / "flow").iterdir())
    assert (workdir / "runs" / "model.ckpt").exists()
    assert len((workdir / "runs" / "train.log").read_text().splitlines()) == 3
    out = capsys.readouterr().out
    assert "ap:" in out
    for name in ("effective_config.cfg", "report.txt", "pr_curve.txt", "timings.txt", "detections.txt"):
        assert (workdir / "runs" / name).exists(), name
    test_ids = (workdir / "data" / "splits" / "test.txt").read_text().split()
    timed = [line.split()[0] for line in (workdir / "runs" / "timings.txt").read_text().splitlines()]
    assert timed == sorted(test_ids)


def test_eval_without_detections_names_the_file(workdir, capsys):
    assert run("generate") == 0
    assert run("eval") != 0
    err = capsys.readouterr().err
    assert "detections.txt" in err and "not found" in err


def test_detect_without_checkpoint_fails(workdir, capsys):
    assert run("generate") == 0
    assert run("detect") == 1
    assert "model.ckpt" in capsys.readouterr().err


def test_unknown_key_exits_with_config_error(workdir, capsys):
    assert run("generate", "--set", "train.bogus=1") == 2
    assert "train.bogus" in capsys.readouterr().err


def test_same_seed_same_detections(workdir):
    assert run("generate", "--seed", "7") == 0
    assert run("flow", "--seed", "7") == 0
    records = []
    for rep in range(2):
        out = f"--set=paths.output_dir=run{rep}"
        ckpt = f"--set=paths.checkpoint=run{rep}/m.ckpt"
        assert run("train", "--seed", "7", out, ckpt) == 0
        assert run("detect", "--seed", "7", out, ckpt) == 0
        records.append((workdir / f"run{rep}" / "detections.txt").read_text())
    assert records[0] and records[0] == records[1]
    a, b = (load_checkpoint(workdir / f"run{rep}" / "m.ckpt").tensors for rep in range(2))
    assert all(np.array_equal(a[name], b[name]) for name in a)


def test_effective_config_reproduces_run(workdir):
    assert run("generate", "--seed", "3") == 0
    assert run("flow", "--seed", "3") == 0
    assert run("train", "--seed", "3") == 0
    assert run("detect", "--seed", "3") == 0
    first = (workdir / "runs" / "detections.txt").read_text()
    echo = (workdir / "runs" / "effective_config.cfg").read_text()
    (workdir / "echo.cfg").write_text(echo.replace("output_dir = runs", "output_dir = again")
                                      .replace("checkpoint = runs/", "checkpoint = again/"))
    assert main(["train", "--config", "echo.cfg"]) == 0
    assert main(["detect", "--config", "echo.cfg"]) == 0
    assert (workdir / "again" / "detections.txt").read_text() == first
    assert read_detections(workdir / "again" / "detections.txt").keys() <= set(
        (workdir / "data" / "splits" / "test.txt").read_text().split())


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "tooldet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "crossval" in proc.stdout
