import subprocess
import sys
from pathlib import Path

import pytest

from dissectprune.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = str(CONFIGS / "tiny.yaml")


def test_validate_ok(capsys):
    assert main(["validate", "--config", TINY]) == 0
    assert capsys.readouterr().out.startswith("ok:")


def test_validate_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("pruning:\n  rounds: 0\n")
    assert main(["validate", "--config", str(bad)]) == 1
    assert "pruning.rounds" in capsys.readouterr().err


def test_resume_without_state_is_validation_error(tmp_path):
    assert main(["run", "--config", TINY, "--out", str(tmp_path / "none"), "--resume"]) == 1


def test_stage_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setattr("dissectprune.pipeline.generate_micro_broden", lambda *a: 1 / 0)
    assert main(["gen-data", "--config", TINY, "--out", str(tmp_path)]) == 2


def test_stepwise_commands_match_run(tmp_path, capsys):
    step, full = tmp_path / "step", tmp_path / "full"
    common = ["--config", TINY, "--out", str(step)]
    assert main(["gen-data", *common]) == 0
    assert main(["train", *common]) == 0
    assert main(["prune", *common, "--round", "1"]) == 0
    assert (step / "trial_0" / "round_01" / "mask" / "mask.json").is_file()
    assert main(["dissect", *common]) == 0
    assert "interpretable units" in capsys.readouterr().out
    assert main(["report", *common]) == 0
    assert main(["run", "--config", TINY, "--out", str(full)]) == 0
    for name in ("interpretability.csv", "consistency.csv"):
        assert (step / name).read_bytes() == (full / name).read_bytes()


def test_prune_overrides_change_config_hash(tmp_path):
    out = tmp_path / "o"
    assert main(["prune", "--config", TINY, "--out", str(out), "--round", "1", "--scope", "layer", "--seed", "3"]) == 0
    assert "scope: layer" in (out / "config.yaml").read_text()
    assert (out / "trial_3" / "round_01" / "mask").is_dir()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dissectprune", "validate", "--config", TINY],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
