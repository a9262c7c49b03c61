import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mattekit.cli import main, thread_cap
from mattekit.storage import read_matte

TOY_CONFIG = """\
seed: 3
dataset:
  n_backgrounds: 2
  d_min: 2
  d_max: 6
  crop_sizes: [48]
  train_size: 48
model:
  width_multiplier: 0.125
training:
  stage1_steps: 4
  stage2_steps: 2
  finetune_steps: 2
  batch_size: 2
  lr: 0.001
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.yaml"
    cfg.write_text(TOY_CONFIG)
    assert main(["synth", "--config", str(cfg), "--toy", "2,2", "--toy-size", "48",
                 "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


def _events(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_unknown_subcommand_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "mattekit.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert "usage: mattekit" in proc.stderr


def test_missing_arguments_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("training:\n  lerning_rate: 1\n")
    assert main(["inspect", str(bad), "--config", str(bad)]) == 1
    assert "lerning_rate" in capsys.readouterr().err


def test_train_outputs(pipeline):
    root, _ = pipeline
    run = root / "run"
    rows = list(csv.DictReader(open(run / "loss.csv")))
    assert [r["phase"] for r in rows] == ["stage1"] * 4 + ["stage2"] * 2 + ["finetune"] * 2
    events = _events(run / "run.jsonl")
    kinds = [e["event"] for e in events]
    assert kinds[0] == "start" and kinds[1] == "config" and kinds[-1] == "done"
    assert kinds.count("step") == 8
    assert events[1]["effective"]["training"]["lr"] == 0.001
    assert events[1]["effective"]["seed"] == 3


def test_train_is_reproducible(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (root / "run" / "model.ckpt").read_bytes()
    assert (tmp_path / "loss.csv").read_bytes() == (root / "run" / "loss.csv").read_bytes()


def test_resume_continues_after_completed_phase(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "a"),
                 "--steps", "4,0,0"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "b"),
                 "--checkpoint", str(tmp_path / "a" / "model.ckpt")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b" / "loss.csv")))
    assert [r["phase"] for r in rows] == ["stage2"] * 2 + ["finetune"] * 2
    assert rows[0]["step"] == "4"
    # split run reproduces the uninterrupted one
    assert (tmp_path / "b" / "model.ckpt").read_bytes() == (root / "run" / "model.ckpt").read_bytes()


def test_resume_with_other_width_refused(pipeline, tmp_path, capsys):
    root, _ = pipeline
    other = tmp_path / "wide.yaml"
    other.write_text(TOY_CONFIG.replace("0.125", "0.25"))
    code = main(["train", "--config", str(other), "--data", str(root / "data"), "--out", str(tmp_path),
                 "--checkpoint", str(root / "run" / "model.ckpt")])
    assert code == 1
    assert "fingerprint" in capsys.readouterr().err


@pytest.mark.parametrize("refine", ["none", "stage2", "guided:r=3,eps=1e-3"])
def test_infer_and_eval(pipeline, tmp_path, refine):
    root, _ = pipeline
    assert main(["infer", "--checkpoint", str(root / "run" / "model.ckpt"), "--data", str(root / "data"),
                 "--out", str(tmp_path / "pred"), "--refine", refine]) == 0
    preds = sorted((tmp_path / "pred").glob("*.png"))
    assert len(preds) == 4
    a = read_matte(preds[0])
    assert a.shape == (48, 48) and np.all(np.isfinite(a))
    assert main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(root / "data"),
                 "--out", str(tmp_path / "ev")]) == 0
    doc = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert len(doc["rows"]) == 4
    assert all(np.isfinite(r[k]) for r in doc["rows"] for k in ("sad_raw", "mse", "grad", "conn"))


def test_infer_single_image(pipeline, tmp_path):
    root, _ = pipeline
    sample = sorted(p for p in (root / "data").iterdir() if p.is_dir())[0]
    out = tmp_path / "one.png"
    assert main(["infer", "--checkpoint", str(root / "run" / "model.ckpt"), "--image", str(sample / "image.png"),
                 "--trimap", str(sample / "trimap.png"), "--out", str(out)]) == 0
    assert read_matte(out).shape == (48, 48)


def test_bad_refine_flag_rejected(pipeline):
    root, _ = pipeline
    with pytest.raises(SystemExit):
        main(["infer", "--checkpoint", str(root / "run" / "model.ckpt"), "--data", str(root / "data"),
              "--out", "x", "--refine", "bilateral"])


def test_eval_same_dir_is_zero(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["eval", "--pred", str(root / "data"), "--gt", str(root / "data"), "--out", str(tmp_path)]) == 0
    rows = list(csv.reader(open(tmp_path / "metrics.csv")))
    assert rows[0][0].startswith("# params:")
    header, body = rows[1], rows[2:]
    for r in body:
        rec = dict(zip(header, r))
        assert float(rec["sad_raw"]) == 0.0 and float(rec["mse"]) == 0.0


def test_sweep_commands(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["sweep", "--data", str(root / "data"), "--baseline", "--out", str(tmp_path / "b")]) == 0
    agg = json.loads((tmp_path / "b" / "sweep.json").read_text())["aggregate"]
    assert [a["d"] for a in agg] == [1, 4, 7, 10, 13, 16, 19]
    assert main(["sweep", "--data", str(root / "data"), "--checkpoint", str(root / "run" / "model.ckpt"),
                 "--d-list", "2,5", "--refine", "none", "--out", str(tmp_path / "m")]) == 0
    agg = json.loads((tmp_path / "m" / "sweep.json").read_text())["aggregate"]
    assert [a["d"] for a in agg] == [2, 5]


def test_inspect_outputs(pipeline, capsys):
    root, cfg = pipeline
    assert main(["inspect", str(root / "run" / "model.ckpt")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "checkpoint" and info["meta"]["phase"] == "finetune"
    assert info["meta"]["step"] == 8 and info["meta"]["adam"]["t"] == 8
    assert main(["inspect", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["effective"]["model"]["width_multiplier"] == 0.125
    assert main(["inspect", str(root / "data")]) == 0
    assert json.loads(capsys.readouterr().out)["n_samples"] == 4


def test_threads_env(monkeypatch):
    monkeypatch.delenv("MATTEKIT_THREADS", raising=False)
    assert thread_cap() is None
    monkeypatch.setenv("MATTEKIT_THREADS", "2")
    assert thread_cap() == 2
    monkeypatch.setenv("MATTEKIT_THREADS", "zero")
    with pytest.raises(ValueError):
        thread_cap()


def test_bad_threads_env_fails_command(monkeypatch, pipeline, capsys):
    root, _ = pipeline
    monkeypatch.setenv("MATTEKIT_THREADS", "-1")
    assert main(["inspect", str(root / "data")]) == 1
    assert "MATTEKIT_THREADS" in capsys.readouterr().err
