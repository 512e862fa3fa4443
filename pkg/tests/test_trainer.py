import json
import os

import numpy as np
import pytest

from lievae import diagnostics as diag
from lievae import toydata, trainer
from lievae.errors import ConfigError, NumericalAbort

TINY = dict(seed=0, image_side=12, latent_dim=3, group_size=2, categories=2,
            hidden_width=12, epochs_phase1=2, epochs_phase2=2, batch_size=8,
            k_diag=3, diag_batch=8, data_count=32, data_seed=5,
            freeze_epochs=0, fvm_votes=0)


def tiny_config(**overrides):
    return trainer.TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def pixels():
    return toydata.generate_dataset(32, 12, seed=5).pixels01()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError) as err:
        trainer.TrainConfig.from_dict({"learning_rte": 0.001})
    assert "learning_rte" in str(err.value)


def test_config_type_and_range_checks():
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"batch_size": 8.5})
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"batch_size": True})
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"mi_stop_decoder_grad": 1})
    with pytest.raises(ConfigError):
        trainer.TrainConfig.from_dict({"data_path": 3})
    with pytest.raises(ConfigError):
        tiny_config(tau=0.0).validate()
    with pytest.raises(ConfigError):
        tiny_config(f_target=1.0).validate()
    with pytest.raises(ConfigError):
        tiny_config(c_min=1.0, c_max=0.5).validate()
    with pytest.raises(ConfigError):
        tiny_config(image_side=8).validate()
    with pytest.raises(ConfigError):
        tiny_config(percentile_p=101.0).validate()


def test_config_roundtrip_and_float_coercion():
    cfg = trainer.TrainConfig.from_dict({"alpha": 2, "seed": 3})
    assert isinstance(cfg.alpha, float) and cfg.alpha == 2.0
    back = trainer.TrainConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_phase1_reconstruction_improves(pixels):
    cfg = tiny_config(epochs_phase1=3, epochs_phase2=0)
    model, stats, log = trainer.train_phase1(cfg, pixels)
    recon = [r["recon"] for r in log.epoch_rows if r["phase"] == 1]
    assert len(recon) == 3
    assert recon[-1] < recon[0]
    assert stats.count.min() >= 1
    assert model.params.step == 3 * (32 // 8)


def test_data_validation(pixels):
    cfg = tiny_config(batch_size=64)
    with pytest.raises(ValueError):
        trainer.train_phase1(cfg, pixels)
    with pytest.raises(ValueError):
        trainer.train_phase1(tiny_config(), pixels[:, :100])


def test_diag_cadence(pixels):
    cfg = tiny_config(epochs_phase1=2, epochs_phase2=0, k_diag=3)
    model, stats, log = trainer.train_phase1(cfg, pixels)
    steps = 2 * (32 // 8)  # 8 optimizer steps, evals at 3 and 6
    evals = {row["step"] for row in log.phase_rows}
    assert evals == {3, 6, steps}  # phase end is always measured
    n_pairs = len(stats.pairs)
    assert len(log.diag_rows) == 3 * n_pairs
    assert stats.count.max() == 3


def test_phase_end_eval_not_duplicated(pixels):
    cfg = tiny_config(epochs_phase1=1, epochs_phase2=0, k_diag=2)
    model, stats, log = trainer.train_phase1(cfg, pixels)
    # 4 steps with evals at 2 and 4; step 4 must appear exactly once.
    steps = [row["step"] for row in log.phase_rows]
    assert steps == [2, 4]


def test_phase2_calibrates_then_adapts(pixels):
    cfg = tiny_config()
    model, stats, log = trainer.train_phase1(cfg, pixels)
    model, cal, log = trainer.train_phase2(cfg, pixels, model, stats, log)
    assert np.isfinite(cal.c_emp)
    assert cal.history[0]["epoch"] == 0
    assert cal.history[0]["c"] == cal.c_emp
    # freeze_epochs=0: C adapts after every phase-2 epoch.
    assert len(cal.history) == 1 + cfg.epochs_phase2
    phase2_rows = [r for r in log.phase_rows if r["phase"] == 2]
    assert all(np.isfinite(r["c"]) and np.isfinite(r["r_bar"])
               for r in phase2_rows)


def test_freeze_keeps_c_constant(pixels):
    cfg = tiny_config(freeze_epochs=10)
    model, stats, log = trainer.train_phase1(cfg, pixels)
    model, cal, log = trainer.train_phase2(cfg, pixels, model, stats, log)
    assert len(cal.history) == 1
    assert cal.c == cal.c_emp


def test_phase2_resume_from_checkpoint_is_bitwise(pixels, tmp_path):
    cfg = tiny_config()
    model, stats, _ = trainer.train_phase1(cfg, pixels)
    path = str(tmp_path / "ck.npz")
    trainer.save_run_checkpoint(path, model, stats, None, cfg)
    reloaded, stats2, cal2, cfg2 = trainer.load_run_checkpoint(path)
    assert cal2 is None and cfg2 == cfg
    np.testing.assert_array_equal(stats2.d_mean, stats.d_mean)

    reloaded, cal_a, _ = trainer.train_phase2(cfg2, pixels, reloaded, stats2)
    model, cal_b, _ = trainer.train_phase2(cfg, pixels, model, stats)
    assert cal_a.c == cal_b.c
    for key, val in model.params.values.items():
        np.testing.assert_array_equal(reloaded.params.values[key], val)


def test_lambda_unc_zero_matches_plain_continuation(pixels):
    # With the hinge weight at zero, phase 2 is the same computation as
    # more phase-1 epochs, draw for draw.
    cfg_a = tiny_config(lambda_unc=0.0)
    m_a, st_a, _ = trainer.train_phase1(cfg_a, pixels)
    m_a, _, _ = trainer.train_phase2(cfg_a, pixels, m_a, st_a)
    cfg_b = tiny_config(lambda_unc=0.0, epochs_phase1=4, epochs_phase2=0)
    m_b, _, _ = trainer.train_phase1(cfg_b, pixels)
    for key, val in m_a.params.values.items():
        np.testing.assert_array_equal(m_b.params.values[key], val)


def test_hinge_changes_updates_when_forced_active(pixels):
    # With C forced far above every ratio the hinge is active, so the
    # phase-2 updates must differ from the lambda_unc=0 path.
    def run(cfg):
        m, st, _ = trainer.train_phase1(cfg, pixels)
        cal = cfg.calibration()
        cal.c = cal.c_emp = 1e3
        m, _, _ = trainer.train_phase2(cfg, pixels, m, st, cal=cal)
        return m

    m_on = run(tiny_config(epochs_phase1=1, epochs_phase2=1))
    m_off = run(tiny_config(epochs_phase1=1, epochs_phase2=1, lambda_unc=0.0))
    gap = np.abs(m_on.params.values["gen"] - m_off.params.values["gen"]).max()
    assert gap > 0.0


def test_numerical_abort(pixels, tmp_path):
    cfg = tiny_config(learning_rate=1e12, epochs_phase1=2, epochs_phase2=0,
                      data_path=None)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalAbort):
            trainer.train_phase1(cfg, pixels)


def test_run_curriculum_outputs_and_determinism(tmp_path):
    cfg = tiny_config(epochs_phase1=1, epochs_phase2=1, fvm_votes=10,
                      fvm_samples=8)
    rep1 = trainer.run_curriculum(cfg, str(tmp_path / "a"))
    rep2 = trainer.run_curriculum(cfg, str(tmp_path / "b"))
    for name in ("config.json", "dataset.bin", "checkpoint.npz",
                 "diagnostics.csv", "phases.csv", "report.json"):
        assert os.path.exists(tmp_path / "a" / name)
    for name in ("diagnostics.csv", "phases.csv", "report.json",
                 "dataset.bin"):
        assert (tmp_path / "a" / name).read_bytes() == \
            (tmp_path / "b" / name).read_bytes(), name
    assert rep1 == rep2
    assert rep1["status"] == "ok"
    assert rep1["calibration"]["c_emp"] > 0.0
    assert len(rep1["pairs"]) == 3
    assert rep1["metrics"]["fvm"] is not None

    header = (tmp_path / "a" / "diagnostics.csv").read_text().splitlines()[0]
    assert header == "step,phase,i,j,D,Delta,Dbar,Deltabar,r,C,R,f_active"
    header = (tmp_path / "a" / "phases.csv").read_text().splitlines()[0]
    assert header == ("step,phase,epoch,d_fresh,delta_fresh,d_bar,delta_bar,"
                      "c,r_bar,f_active,recon")


def test_run_curriculum_uses_existing_dataset(tmp_path):
    ds = toydata.generate_dataset(24, 12, seed=11)
    data_path = str(tmp_path / "data.bin")
    toydata.save_dataset(ds, data_path)
    cfg = tiny_config(epochs_phase1=1, epochs_phase2=0, data_path=data_path,
                      data_count=9999)  # count comes from the file
    rep = trainer.run_curriculum(cfg, str(tmp_path / "run"))
    assert rep["dataset"]["count"] == 24
    with pytest.raises(ValueError):
        trainer.run_curriculum(
            tiny_config(data_path=str(tmp_path / "missing.bin")),
            str(tmp_path / "run2"))


def test_run_curriculum_failure_report(tmp_path):
    cfg = tiny_config(learning_rate=1e12, epochs_phase1=2, epochs_phase2=0)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalAbort):
            trainer.run_curriculum(cfg, str(tmp_path / "bad"))
    report = json.loads((tmp_path / "bad" / "report.json").read_text())
    assert report["status"] == "failed"
    assert "step" in report["stage"]
