import subprocess
import sys

import pytest

from eefl.checkpoint import load_checkpoint
from eefl.cli import main

TINY = """\
seed: 2
rounds: 4
eval_every: 2
num_clients: 8
fraction: 0.25
record_wallclock: false
model:
  hidden_dim: 8
data:
  samples_per_client: 10
  eval_samples: 40
local:
  epochs: 1
  freeze_frontend: true
pretrain:
  epochs: 1
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def test_validate(config, capsys):
    assert main(["validate", "--config", str(config)]) == 0
    assert "config ok: 3 exits, 2 of 8 clients" in capsys.readouterr().out


def test_validate_reports_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("rounds: 0\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "rounds must be >= 1" in capsys.readouterr().err


def test_run_then_report(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "config.yaml").exists()
    load_checkpoint(out / "final.eefl")
    capsys.readouterr()
    assert main(["report", str(out / "metrics.csv"), "--compare", str(out / "metrics.csv"),
                 "--plots", str(tmp_path / "plots"), "--thresholds", "9,9,9"]) == 0
    text = capsys.readouterr().out
    assert "per-exit delta" in text and "+0.0000" in text
    assert (tmp_path / "plots" / "loss.dat").exists()


def test_seed_override_changes_run(config, tmp_path):
    main(["run", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "9"])
    main(["run", "--config", str(config), "--out", str(tmp_path / "c"), "--parallel", "2"])
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a != b
    assert "seed: 9" in (tmp_path / "b" / "config.yaml").read_text()


def test_pretrain_writes_checkpoint(config, tmp_path, capsys):
    ckpt = tmp_path / "p.eefl"
    assert main(["pretrain", "--config", str(config), "--out", str(ckpt)]) == 0
    assert load_checkpoint(ckpt).config.num_exits == 3


def test_report_missing_file(tmp_path, capsys):
    assert main(["report", str(tmp_path / "none.csv")]) == 2


def test_module_entry_point(config):
    done = subprocess.run([sys.executable, "-m", "eefl", "validate", "--config", str(config)],
                          capture_output=True, text=True)
    assert done.returncode == 0 and "config ok" in done.stdout
