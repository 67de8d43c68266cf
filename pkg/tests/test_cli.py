import os

import numpy as np
import pytest

from gridshield import cli

from conftest import THREE_BUS_TEXT


@pytest.fixture(scope="module")
def case_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("clicase") / "case3.m"
    path.write_text(THREE_BUS_TEXT)
    return str(path)


def test_stage1_subcommand(case_file, tmp_path, capsys):
    out = str(tmp_path / "s1")
    cli.main(["stage1", "--case", case_file, "--out", out])
    assert os.path.exists(os.path.join(out, "stage1.csv"))
    assert "J1 total" in capsys.readouterr().out


def test_attack_subcommand(case_file, tmp_path, capsys):
    out = str(tmp_path / "atk")
    cli.main(["attack", "--case", case_file, "--k", "1", "--out", out,
              "--no-render"])
    for name in ("attacks.csv", "heatmap_omega.csv", "heatmap_psi.csv"):
        assert os.path.exists(os.path.join(out, name))
    assert "J2 total" in capsys.readouterr().out


def test_stage3_oracle_subcommand(case_file, tmp_path, capsys):
    out = str(tmp_path / "orc")
    cli.main(["stage3-oracle", "--case", case_file, "--k", "1", "--out", out,
              "--no-render"])
    assert os.path.exists(os.path.join(out, "stage3_oracle.csv"))
    assert "J3 total" in capsys.readouterr().out


def test_train_evaluate_timing_round_trip(case_file, tmp_path, capsys):
    out = str(tmp_path / "tr")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        '{"case_path": "%s", "k": 1.0, "seed": 5, "episodes": 2,\n'
        ' "eval_scenarios": 0, "out_dir": "%s",\n'
        ' "hyper": {"warmup": 10000, "hidden": [8, 8]}}' % (case_file, out))
    cli.main(["train", "--config", str(cfg), "--no-render"])
    ckpt = os.path.join(out, "checkpoint.npz")
    assert os.path.exists(ckpt)

    out2 = str(tmp_path / "ev")
    cli.main(["evaluate", "--case", case_file, "--checkpoint", ckpt,
              "--scenarios", "2", "--k", "1", "--out", out2, "--no-render"])
    assert os.path.exists(os.path.join(out2, "gap_report.csv"))
    assert "mean gap" in capsys.readouterr().out

    out3 = str(tmp_path / "tm")
    cli.main(["timing", "--case", case_file, "--checkpoint", ckpt,
              "--k", "1", "--out", out3, "--no-render"])
    assert os.path.exists(os.path.join(out3, "timing_report.csv"))
    assert "factor" in capsys.readouterr().out
