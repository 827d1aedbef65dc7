import json

import numpy as np
import pytest

from dscloop.cli import main
from dscloop.codec import synthetic_frame
from dscloop.io import load_weights, read_frames, save_weights, write_frames
from dscloop.network import build_student, fold_bn


@pytest.fixture
def workspace(tmp_path):
    frames = [synthetic_frame(40, 48, seed=s, chroma=True) for s in range(2)]
    write_frames(tmp_path / "eval.yuv", frames)
    write_frames(tmp_path / "train.yuv", [synthetic_frame(64, 64, seed=7)])
    save_weights(tmp_path / "w.dscf", fold_bn(build_student(0)))
    save_weights(tmp_path / "w_unfolded.dscf", build_student(0))
    cfg = {
        "data": {"train": ["train.yuv"], "eval": ["eval.yuv"]},
        "weights": "w.dscf",
        "filter": {"ctu": 16},
        "output": {"dir": "out"},
    }
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path


@pytest.mark.parametrize("mode", ["none", "cnn", "cnn+rm", "cnn+frame-control", "cnn+ctu-control"])
def test_encoder_decoder_bit_exact(workspace, mode):
    cfg = str(workspace / "run.json")
    assert main(["filter", "--config", cfg, "--mode", mode, "--qp", "37"]) == 0
    assert main(["filter", "--config", cfg, "--decode"]) == 0
    out = workspace / "out"
    assert (out / "filtered.yuv").read_bytes() == (out / "decoded.yuv").read_bytes()
    assert len(read_frames(out / "decoded.yuv")) == 2
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["mode"] == mode


def test_analyze_prints_sum(capsys):
    assert main(["analyze"]) == 0
    text = capsys.readouterr().out
    assert "Sum 11,114" in text and "10,825" in text and "2.87%" in text


def test_analyze_json_teacher(capsys):
    assert main(["analyze", "--model", "teacher", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["params_total"] == 109_642 and report["border"] == 25


def test_fold_command(workspace):
    src = workspace / "w_unfolded.dscf"
    assert main(["fold", "--weights", str(src), "--out", str(workspace / "f.dscf")]) == 0
    assert load_weights(workspace / "f.dscf").folded
    assert main(["fold", "--weights", str(workspace / "w.dscf")]) == 3


def test_train_command_writes_artifacts(workspace):
    cfg = json.loads((workspace / "run.json").read_text())
    cfg["train"] = {"n1": 0, "n2": 0, "n3": 1, "patches": 4, "batch": 2}
    (workspace / "run.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(workspace / "run.json"), "--seed", "1"]) == 0
    out = workspace / "out"
    assert load_weights(out / "student.dscf").folded
    assert not load_weights(out / "student_unfolded.dscf").folded
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["epochs"] == [0, 0, 1] and summary["seed"] == 1
    assert "phase=student epoch=1" in (out / "loss.log").read_text()


def test_eval_command(workspace, capsys):
    assert main(["eval", "--config", str(workspace / "run.json"), "--mode", "cnn+rm"]) == 0
    summary = json.loads((workspace / "out" / "eval_summary.json").read_text())
    assert [p["qp"] for p in summary["points"]] == [22, 27, 32, 37]
    assert np.isfinite(summary["bd_rate_percent"])
    assert "bd_rate=" in capsys.readouterr().out


def test_exit_codes(workspace, tmp_path, capsys):
    assert main(["filter", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["filter", "--config", str(workspace / "run.json"), "--mode", "magic"]) == 2
    bad = workspace / "bad.json"
    bad.write_text(json.dumps({"data": {"eval": ["nope.yuv"]}, "weights": "w.dscf"}))
    assert main(["filter", "--config", str(bad)]) == 3
    assert main(["filter", "--config", str(bad), "--decode", "--out", str(tmp_path / "empty")]) == 3
    assert main(["no-such-command"]) == 2
    capsys.readouterr()
