import json
import os

import numpy as np
import pytest

from lievae import cli, toydata

TINY_CFG = {"seed": 0, "image_side": 12, "latent_dim": 3, "group_size": 2,
            "categories": 2, "hidden_width": 12, "epochs_phase1": 1,
            "epochs_phase2": 1, "batch_size": 8, "k_diag": 3,
            "diag_batch": 8, "data_count": 24, "data_seed": 5,
            "freeze_epochs": 0, "fvm_votes": 0}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY_CFG))
    out = root / "run"
    assert cli.main(["train", "--config", str(cfg_path),
                     "--out-dir", str(out)]) == 0
    return out


def test_generate_data(tmp_path, capsys):
    out = tmp_path / "data.bin"
    code = cli.main(["generate-data", "--count", "10", "--side", "12",
                     "--seed", "3", "--out", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    assert "sha256" in printed and "10 images" in printed
    ds = toydata.load_dataset(str(out))
    assert ds.count == 10 and ds.side == 12


def test_generate_data_io_failure(tmp_path):
    missing_dir = tmp_path / "no" / "such" / "dir" / "x.bin"
    assert cli.main(["generate-data", "--count", "5", "--side", "12",
                     "--seed", "0", "--out", str(missing_dir)]) == 1


def test_generate_data_validation_failure(tmp_path):
    out = tmp_path / "d.bin"
    assert cli.main(["generate-data", "--count", "5", "--side", "4",
                     "--seed", "0", "--out", str(out)]) == 2


def test_train_config_errors(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({**TINY_CFG, "learning_rte": 0.1}))
    assert cli.main(["train", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "r")]) == 2
    cfg.write_text("{not json")
    assert cli.main(["train", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "r")]) == 2
    cfg.write_text(json.dumps([1, 2]))
    assert cli.main(["train", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "r")]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "absent.json"),
                     "--out-dir", str(tmp_path / "r")]) == 1


def test_train_numerical_abort(tmp_path):
    cfg = tmp_path / "explode.json"
    cfg.write_text(json.dumps({**TINY_CFG, "learning_rate": 1e12,
                               "epochs_phase1": 2, "epochs_phase2": 0}))
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["train", "--config", str(cfg),
                         "--out-dir", str(tmp_path / "r")])
    assert code == 3
    report = json.loads((tmp_path / "r" / "report.json").read_text())
    assert report["status"] == "failed"


def test_train_artifacts(run_dir):
    for name in ("config.json", "dataset.bin", "checkpoint.npz",
                 "diagnostics.csv", "phases.csv", "report.json"):
        assert (run_dir / name).exists()
    report = json.loads((run_dir / "report.json").read_text())
    assert report["status"] == "ok"


def test_diagnose_all_pairs(run_dir, tmp_path):
    out = tmp_path / "diag.csv"
    code = cli.main(["diagnose", "--checkpoint", str(run_dir / "checkpoint.npz"),
                     "--data", str(run_dir / "dataset.bin"),
                     "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "i,j,D,Delta,r,R,U"
    assert len(lines) == 1 + 3  # 3 pairs for latent_dim=3
    values = lines[1].split(",")
    assert values[0] == "0" and values[1] == "1"
    assert all(np.isfinite(float(v)) for v in values[2:])


def test_diagnose_single_pair_and_determinism(run_dir, tmp_path, capsys):
    args = ["diagnose", "--checkpoint", str(run_dir / "checkpoint.npz"),
            "--data", str(run_dir / "dataset.bin"), "--pairs", "0,2"]
    assert cli.main(args) == 0
    first = capsys.readouterr().out
    assert cli.main(args) == 0
    assert capsys.readouterr().out == first
    assert first.splitlines()[1].split(",")[:2] == ["0", "2"]


def test_diagnose_rejects_bad_pairs(run_dir):
    base = ["diagnose", "--checkpoint", str(run_dir / "checkpoint.npz"),
            "--data", str(run_dir / "dataset.bin")]
    assert cli.main(base + ["--pairs", "2,1"]) == 2
    assert cli.main(base + ["--pairs", "0,9"]) == 2
    assert cli.main(base + ["--pairs", "nope"]) == 2


def test_diagnose_side_mismatch(run_dir, tmp_path):
    other = tmp_path / "wide.bin"
    toydata.save_dataset(toydata.generate_dataset(6, 14, seed=0), str(other))
    assert cli.main(["diagnose", "--checkpoint",
                     str(run_dir / "checkpoint.npz"),
                     "--data", str(other)]) == 2


def test_report_tables(run_dir, tmp_path):
    out = tmp_path / "rep"
    assert cli.main(["report", "--run-dir", str(run_dir),
                     "--out", str(out)]) == 0
    for name in ("panel_deformation.csv", "panel_stability.csv",
                 "panel_reconstruction.csv", "summary.txt"):
        assert (out / name).exists()
    stab = (out / "panel_stability.csv").read_text().splitlines()
    assert stab[0] == "step,r_bar,boundary"
    assert stab[1].endswith(",1.0")
    summary = (out / "summary.txt").read_text()
    assert "reconstruction:" in summary and "c_emp:" in summary


def test_report_missing_run(tmp_path):
    assert cli.main(["report", "--run-dir", str(tmp_path / "ghost"),
                     "--out", str(tmp_path / "rep")]) == 1


def test_unknown_command_exits_via_argparse():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
