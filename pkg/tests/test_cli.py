import csv
import subprocess
import sys

import numpy as np
import pytest

from mirrordepth.cli import main
from mirrordepth.io import read_checkpoint_file, read_dataset, read_pfm

FAST = ["--set", "optim.total_steps=6", "--set", "optim.batch_size=2", "--set", "data.frames=3",
        "--set", "data.size=32"]


def test_params_paper(capsys):
    assert main(["params", "--preset", "paper"]) == 0
    assert capsys.readouterr().out.strip() == "1,094,113"


def test_usage_errors(tmp_path, capsys):
    assert main(["params", "--bogus"]) == 2
    assert main(["params", "--set", "optim.nope=1"]) == 2
    assert main(["train", "--run-dir", str(tmp_path / "r"), "--set", "no.such=1"]) == 2
    assert main([]) == 2
    assert main(["--help"]) == 0


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "mirrordepth.cli", "params", "--nope"], capture_output=True, text=True)
    assert out.returncode == 2 and "unrecognized" in out.stderr


def test_gradcheck_primitives(capsys):
    assert main(["gradcheck", "--preset", "toy", "--primitives-only"]) == 0
    assert "gradcheck PASS" in capsys.readouterr().out


def test_synth_round_trip(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--kind", "dolly", "--frames", "3", "--size", "32"]) == 0
    frames = read_dataset(tmp_path / "ds")
    assert [f.frame_id for f in frames] == [0, 1, 2]
    assert frames[0].rgb.shape == (3, 32, 32)


def _train(tmp_path, name, *extra):
    d = tmp_path / name
    assert main(["train", "--run-dir", str(d), *FAST, *extra]) == 0
    return d


def test_train_outputs_and_replay(tmp_path):
    a = _train(tmp_path, "a")
    for f in ("config.resolved", "loss.csv", "epochs.csv", "checkpoint.mdc", "run.log"):
        assert (a / f).exists(), f
    with open(a / "loss.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["step"]) for r in rows] == list(range(6))
    b = tmp_path / "b"
    assert main(["train", "--run-dir", str(b), "--config", str(a / "config.resolved")]) == 0
    for f in ("loss.csv", "epochs.csv", "checkpoint.mdc", "config.resolved"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_resume_matches_straight_run(tmp_path):
    a = _train(tmp_path, "a")
    b = _train(tmp_path, "b", "--until", "2")
    c = tmp_path / "c"
    assert main(["train", "--run-dir", str(c), "--resume", str(b / "checkpoint.mdc")]) == 0
    assert (a / "checkpoint.mdc").read_bytes() == (c / "checkpoint.mdc").read_bytes()
    assert main(["train", "--run-dir", str(tmp_path / "d"), "--resume", str(b / "checkpoint.mdc"),
                 "--set", "optim.lr0=1"]) == 2


def test_run_dir_must_be_empty(tmp_path):
    d = tmp_path / "r"
    d.mkdir()
    (d / "x").write_text("keep")
    assert main(["train", "--run-dir", str(d), *FAST]) == 2
    assert (d / "x").read_text() == "keep"


def test_auto_numbered_run_dirs(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "ds"), "--frames", "2", "--size", "16"]) == 0
    root = tmp_path / "runs"
    for _ in range(2):
        assert main(["eval", "--runs-root", str(root), "--checkpoint", str(_ckpt(tmp_path)),
                     "--data", str(tmp_path / "ds")]) == 0
    assert sorted(p.name for p in root.iterdir()) == ["eval-0001", "eval-0002"]


def _ckpt(tmp_path):
    d = tmp_path / "model"
    if not d.exists():
        _train(tmp_path, "model")
    return d / "checkpoint.mdc"


def test_corrupt_checkpoint_reports_crc(tmp_path, capsys):
    ck = _ckpt(tmp_path)
    raw = bytearray(ck.read_bytes())
    raw[-100] ^= 0xFF
    bad = tmp_path / "bad.mdc"
    bad.write_bytes(bytes(raw))
    assert main(["eval", "--run-dir", str(tmp_path / "e"), "--checkpoint", str(bad)]) == 1
    assert "CRC" in capsys.readouterr().err


def test_infer_eval_consistency(tmp_path):
    ck = _ckpt(tmp_path)
    assert main(["synth", "--out", str(tmp_path / "seq"), "--kind", "dolly", "--frames", "3", "--size", "32"]) == 0
    assert main(["infer", "--run-dir", str(tmp_path / "i"), "--checkpoint", str(ck),
                 "--input", str(tmp_path / "seq")]) == 0
    maps = sorted((tmp_path / "i").glob("*.pfm"))
    assert len(maps) == 3
    d = read_pfm(maps[0])
    assert d.shape == (32, 32) and d.valid.all()
    assert main(["infer", "--run-dir", str(tmp_path / "i2"), "--checkpoint", str(ck),
                 "--input", str(tmp_path / "seq")]) == 0
    assert maps[0].read_bytes() == (tmp_path / "i2" / maps[0].name).read_bytes()

    assert main(["eval", "--run-dir", str(tmp_path / "e"), "--checkpoint", str(ck),
                 "--data", str(tmp_path / "seq"), "--crop", "eigen", "--cap", "20"]) == 0
    with open(tmp_path / "e" / "metrics.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4 and rows[-1]["frame_id"] == "aggregate"
    assert all(float(r["d1"]) <= float(r["d2"]) <= float(r["d3"]) for r in rows)

    assert main(["consistency", "--run-dir", str(tmp_path / "c"), "--checkpoint", str(ck),
                 "--data", str(tmp_path / "seq"), "--window", "2"]) == 0
    with open(tmp_path / "c" / "consistency.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 6
    # pairs without co-visible pixels are NaN; everything else lies in [0, 1)
    vals = np.array([[float(r[k]) for k in ("incons_model", "incons_gt", "incons_random")] for r in rows])
    assert np.all((vals[~np.isnan(vals)] >= 0) & (vals[~np.isnan(vals)] < 1))
    assert (tmp_path / "c" / "continuity.csv").read_text().startswith("class,median_depth,object_height\n")
