import json
import subprocess
import sys

import pytest

from attentionmixer.cli import COMMANDS, EXIT_CODES, load_config, run


def tiny_config(tmp_path, **extra):
    cfg = {
        "cohort_dir": str(tmp_path / "cohort"),
        "out_dir": str(tmp_path / "run"),
        "synth": {"n_patients": 12, "side": 8},
        "encoder": {"side": 8, "patch": 4, "d_enc": 8, "depth": 1, "heads": 2, "d_f": 8},
        "model": {"heads": 2, "mixer_hidden": 8},
        "pretrain": {"steps": 3, "batch_size": 4},
        "train": {"max_epochs": 1, "patience": 1},
        "eval": {"k": 2, "importance_repeats": 1},
    }
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "attentionmixer.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in COMMANDS:
        assert cmd in out.stdout


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["eval", "--config", tiny_config(tmp_path), "--bogus"])
    assert exc.value.code == 2


def test_unknown_config_key(tmp_path, capsys):
    code = run(["synth", "--config", tiny_config(tmp_path, colour="red")])
    assert code == EXIT_CODES["config"]
    assert last_json(capsys.readouterr().err)["error"] == "config"


def test_overrides_beat_file(tmp_path):
    cfg = load_config(tiny_config(tmp_path, seed=4), {"seed": 9, "variant": None})
    assert cfg["seed"] == 9 and cfg["variant"] == "full"


def test_missing_manifest(tmp_path, capsys):
    assert run(["eval", "--config", tiny_config(tmp_path)]) == EXIT_CODES["missing_file"]
    assert last_json(capsys.readouterr().err)["error"] == "missing_file"


def test_freeze_without_checkpoint(tmp_path, capsys):
    cfg = tiny_config(tmp_path, train={"max_epochs": 1, "patience": 1, "freeze_encoder": True})
    assert run(["synth", "--config", cfg]) == 0
    capsys.readouterr()
    assert run(["eval", "--config", cfg]) == EXIT_CODES["prerequisite"]
    err = last_json(capsys.readouterr().err)
    assert err["error"] == "prerequisite"


def test_pipeline(tmp_path, capsys):
    cfg = tiny_config(tmp_path, encoder_checkpoint=str(tmp_path / "run" / "encoder.ckpt"))
    for cmd in ("synth", "pretrain", "train", "eval", "importance"):
        assert run([cmd, "--config", cfg]) == 0, capsys.readouterr().err
    run_dir = tmp_path / "run"
    for name in ("encoder.ckpt", "pretrain_loss.csv", "model.ckpt", "metrics.json", "importance.csv", "histogram.csv"):
        assert (run_dir / name).exists(), name
    first = (run_dir / "metrics.json").read_bytes()
    assert run(["eval", "--config", cfg]) == 0
    assert (run_dir / "metrics.json").read_bytes() == first


def test_ablate_rows_and_out_flag(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert run(["synth", "--config", cfg]) == 0
    assert run(["ablate", "--config", cfg, "--out", str(tmp_path / "abl")]) == 0
    summary = last_json(capsys.readouterr().out)
    assert len(summary) == 6
    lines = (tmp_path / "abl" / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 7
