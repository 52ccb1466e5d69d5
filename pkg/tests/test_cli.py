import json
import subprocess
import sys
from pathlib import Path

import pytest

from tinyloc.cli import main

TINY_MODEL = {"d_model": 32, "n_layers": 1, "n_heads": 2, "patch_grid": 4,
              "mask_channels": 8, "max_seq_len": 96}


def _sha_tree(root: Path) -> dict:
    import hashlib
    out = {}
    for f in sorted(root.rglob("*")):
        if f.is_file() and f.suffix != ".png":
            out[str(f.relative_to(root))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_gen_data_deterministic(tmp_path):
    for d in ("a", "b"):
        rc = main(["gen-data", "--seed", "7", "--n", "12", "--mix", "0.5,0.25,0.25",
                   "--out", str(tmp_path / d)])
        assert rc == 0
    assert _sha_tree(tmp_path / "a") == _sha_tree(tmp_path / "b")


def test_train_eval_cycle(tmp_path, capsys):
    assert main(["gen-data", "--seed", "3", "--n", "16", "--mix", "1.0,0,0",
                 "--out", str(tmp_path / "data"), "--split-fracs", "0.5,0.0,0.5"]) == 0
    cfg = {"stage": 1, "steps": 3, "batch_size": 4, "lr": 1e-3, "warmup": 1,
           "seed": 0, "data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "run"),
           "scheme": "Pemb", "log_every": 1, "model": TINY_MODEL}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "metrics.png").exists()
    assert main(["eval", "--checkpoint", str(tmp_path / "run"), "--data", str(tmp_path / "data"),
                 "--split", "test", "--report", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "report.csv").exists()
    out = capsys.readouterr().out
    assert "Acc@0.5" in out


def test_train_resume_flag(tmp_path):
    assert main(["gen-data", "--seed", "4", "--n", "12", "--mix", "1,0,0",
                 "--out", str(tmp_path / "data"), "--split-fracs", "1.0,0.0,0.0"]) == 0
    cfg = {"stage": 1, "steps": 2, "batch_size": 4, "lr": 1e-3, "warmup": 1,
           "seed": 0, "data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "run"),
           "scheme": "Pemb", "log_every": 1, "model": TINY_MODEL}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.json")]) == 0
    cfg["steps"] = 4
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--resume"]) == 0
    state = json.loads((tmp_path / "run" / "training_state.json").read_text())
    assert state["step"] == 4


def test_error_line_machine_readable(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "missing.json")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("ERROR ")
    payload = json.loads(err[len("ERROR "):])
    assert "type" in payload and "message" in payload


def test_gen_data_bad_mix(tmp_path, capsys):
    rc = main(["gen-data", "--seed", "1", "--n", "4", "--mix", "0.5,0.5,0.5",
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("ERROR ")


def test_gradcheck_small(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out


def test_console_entrypoint_help():
    proc = subprocess.run([sys.executable, "-m", "tinyloc.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-data" in proc.stdout and "gradcheck" in proc.stdout
