import json

import pytest

from blayer.cli import main

SMALL = {"eps_list": [4e-3, 2e-3, 1e-3],
         "grid": {"nx": 17, "ny": 129, "nz": 257},
         "remainder": {"nx": 8, "ny": 32, "n_random": 2}}


@pytest.fixture
def cfg_file(tmp_path):
    def make(raw):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps(raw))
        return str(p)
    return make


def test_success_exit_zero(cfg_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["residual", "--config", cfg_file(SMALL), "--out", str(out), "--no-drift"]) == 0
    assert (out / "summary.csv").exists() and (out / "fits.csv").exists()
    assert "fit combined" in capsys.readouterr().out


def test_skip_remainder_exit_zero(cfg_file, tmp_path):
    raw = dict(SMALL, eps_list=[1e-3])
    assert main(["sweep", "--config", cfg_file(raw), "--out", str(tmp_path / "o"),
                 "--skip-remainder", "--no-drift"]) == 0


def test_stage_failure_exit_one(cfg_file, tmp_path):
    raw = dict(SMALL, eps_list=[0.5, 1e-3])
    assert main(["prandtl1", "--config", cfg_file(raw), "--out", str(tmp_path / "o")]) == 1


def test_bad_config_exit_two(cfg_file, tmp_path, capsys):
    assert main(["validate", "--config", cfg_file({"bogus": 1}), "--out", str(tmp_path)]) == 2
    assert main(["validate", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "blayer:" in capsys.readouterr().err


def test_unwritable_output_exit_two(cfg_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    raw = dict(SMALL, eps_list=[1e-3])
    assert main(["validate", "--config", cfg_file(raw), "--out", str(blocker / "sub")]) == 2
