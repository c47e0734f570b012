import json
import subprocess
import sys

import pytest
import yaml

from livemap.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from livemap.config import config_to_dict, ScenarioConfig, TrainConfig

SMALL = ScenarioConfig(vehicles=6, pedestrians=10, duration=2.0,
                       training=TrainConfig(hidden=[8], batch_size=8, checkpoint_every=0))


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(SMALL)))
    return str(path)


def test_run_writes_outputs(tmp_path, cfg_path):
    out = tmp_path / "out"
    assert main(["run", "--config", cfg_path, "--algo", "eo", "--seed", "1", "--out", str(out)]) == EXIT_OK
    for name in ("tasks.csv", "coverage.csv", "summary.csv", "state_schema.json"):
        assert (out / name).exists()
    assert "central" in json.loads((out / "state_schema.json").read_text())


def test_run_unknown_algorithm(cfg_path, tmp_path, capsys):
    assert main(["run", "--config", cfg_path, "--algo", "bogus", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "bogus" in capsys.readouterr().err


def test_bad_config_names_field(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("schema_version: 1\ncontrol:\n  beta: 2.0\n")
    assert main(["run", "--config", str(path), "--algo", "eo", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "control.beta" in capsys.readouterr().err


def test_validate_config(cfg_path, tmp_path):
    assert main(["validate-config", "--config", cfg_path]) == EXIT_OK
    missing = tmp_path / "nope.yaml"
    assert main(["validate-config", "--config", str(missing)]) in (EXIT_CONFIG, EXIT_IO)


def test_train_then_run(tmp_path, cfg_path):
    ck = tmp_path / "central.bin"
    assert main(["train", "--config", cfg_path, "--steps", "10", "--checkpoint", str(ck)]) == EXIT_OK
    assert ck.exists()
    out = tmp_path / "out"
    assert main(["run", "--config", cfg_path, "--algo", "livemap", "--checkpoint", str(ck),
                 "--out", str(out)]) == EXIT_OK


def test_train_unwritable_checkpoint(tmp_path, cfg_path):
    bad = tmp_path / "no" / "such" / "dir" / "p.bin"
    assert main(["train", "--config", cfg_path, "--steps", "0", "--checkpoint", str(bad)]) == EXIT_IO


def test_sweep_csv(tmp_path, cfg_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--config", cfg_path, "--param", "vehicles", "--values", "4,6", "--algo", "eo,lp",
                 "--out", str(out)]) == EXIT_OK
    assert len(out.read_text().strip().splitlines()) == 1 + 4


@pytest.mark.parametrize("args", [["--param", "colour", "--values", "1"], ["--param", "vehicles", "--values", "a,b"]])
def test_sweep_usage_errors(tmp_path, cfg_path, args):
    assert main(["sweep", "--config", cfg_path, "--out", str(tmp_path / "s.csv")] + args) == EXIT_USAGE


def test_console_entry_point(tmp_path, cfg_path):
    proc = subprocess.run([sys.executable, "-m", "livemap.cli", "validate-config", "--config", cfg_path],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "ok" in proc.stdout
