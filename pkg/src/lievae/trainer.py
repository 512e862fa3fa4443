"""Two-phase training curriculum.

Phase 1 trains the unconstrained objective while accumulating pair
diagnostics at fixed step intervals. At the phase boundary the cross-space
constant C is calibrated from the accumulated ratio distribution. Phase 2
continues training with the deformation-stability hinge added, keeps
accumulating diagnostics, and adapts C once per epoch after a freeze
period.

Reproducibility contract: every random draw comes from a named stream
keyed by the master seed and the global epoch (or global step for
diagnostics), so a control run with more phase-1 epochs sees bitwise the
same training draws as a phase-2 run over the same global epochs, and a
rerun from a phase boundary regenerates the remaining epochs exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import diagnostics as diag
from . import evalmetrics, gradcore as gc, model as model_mod, toydata
from .errors import ConfigError, NumericalAbort
from .seeding import stream_rng

GUMBEL_CLIP = 1e-12


@dataclass
class TrainConfig:
    """Run settings; every field has a working default for the desk scale."""

    seed: int = 0
    image_side: int = 16
    latent_dim: int = 6
    group_size: int = 4
    categories: int = 3
    hidden_width: int = 256
    epochs_phase1: int = 8
    epochs_phase2: int = 12
    batch_size: int = 64
    learning_rate: float = 1e-3
    alpha: float = 0.1
    beta: float = 0.05
    lambda_mi: float = 0.6
    lambda_usage: float = 1.0
    lambda_unc: float = 0.05
    tau: float = 0.67
    gen_scale: float = 2e-4
    percentile_p: float = 90.0
    eta_c: float = 0.05
    f_target: float = 0.5
    c_min: float = 1e-4
    c_max: float = 1e4
    freeze_epochs: int = 10
    k_diag: int = 25
    diag_batch: int = 64
    eps_num: float = 1e-8
    mi_stop_decoder_grad: bool = False
    reset_moments_phase2: bool = False
    data_path: str | None = None
    data_count: int = 2048
    data_seed: int = 7
    fvm_votes: int = 500
    fvm_samples: int = 64

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        """Strict construction: unknown keys and wrong types are rejected."""
        known = {f.name: f.type for f in dc_fields(cls)}
        values = {}
        for key, raw in doc.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            values[key] = _coerce(key, raw, known[key])
        return cls(**values).validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    def validate(self) -> "TrainConfig":
        def positive(name):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive", key=name)

        def non_negative(name):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative", key=name)

        for name in ("batch_size", "learning_rate", "tau", "gen_scale",
                     "hidden_width", "k_diag", "diag_batch", "eps_num",
                     "data_count", "fvm_samples", "eta_c"):
            positive(name)
        for name in ("seed", "epochs_phase1", "epochs_phase2", "alpha", "beta",
                     "lambda_mi", "lambda_usage", "lambda_unc", "freeze_epochs",
                     "data_seed", "fvm_votes"):
            non_negative(name)
        if self.image_side < toydata.MIN_SIDE:
            raise ConfigError(f"image_side must be at least {toydata.MIN_SIDE}",
                              key="image_side")
        if self.latent_dim < 2:
            raise ConfigError("latent_dim must be at least 2", key="latent_dim")
        if self.group_size < 1:
            raise ConfigError("group_size must be positive", key="group_size")
        if self.categories < 2:
            raise ConfigError("categories must be at least 2", key="categories")
        if not 0.0 <= self.percentile_p <= 100.0:
            raise ConfigError("percentile_p must lie in [0, 100]",
                              key="percentile_p")
        if not 0.0 < self.f_target < 1.0:
            raise ConfigError("f_target must lie strictly inside (0, 1)",
                              key="f_target")
        if not 0.0 < self.c_min < self.c_max:
            raise ConfigError("need 0 < c_min < c_max", key="c_min")
        return self

    def model_dims(self) -> model_mod.ModelDims:
        return model_mod.ModelDims(side=self.image_side,
                                   latent_dim=self.latent_dim,
                                   group_size=self.group_size,
                                   categories=self.categories,
                                   hidden=self.hidden_width)

    def loss_weights(self) -> model_mod.LossWeights:
        return model_mod.LossWeights(alpha=self.alpha, beta=self.beta,
                                     lambda_mi=self.lambda_mi,
                                     lambda_usage=self.lambda_usage,
                                     lambda_unc=self.lambda_unc, tau=self.tau)

    def calibration(self) -> diag.CalibrationState:
        return diag.CalibrationState(percentile_p=self.percentile_p,
                                     eta=self.eta_c, f_target=self.f_target,
                                     c_min=self.c_min, c_max=self.c_max,
                                     freeze_epochs=self.freeze_epochs)


def _coerce(key, raw, annot):
    annot = str(annot)
    if "bool" in annot:
        if not isinstance(raw, bool):
            raise ConfigError(f"{key} must be a boolean", key=key)
        return raw
    if "str" in annot:
        if raw is None or isinstance(raw, str):
            return raw
        raise ConfigError(f"{key} must be a string or null", key=key)
    if "int" in annot:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{key} must be an integer", key=key)
        return raw
    if "float" in annot:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key} must be a number", key=key)
        return float(raw)
    raise ConfigError(f"{key} has unsupported type", key=key)


# ---------------------------------------------------------------------------
# logging

DIAG_COLUMNS = ("step", "phase", "i", "j", "D", "Delta", "Dbar", "Deltabar",
                "r", "C", "R", "f_active")
PHASE_COLUMNS = ("step", "phase", "epoch", "d_fresh", "delta_fresh", "d_bar",
                 "delta_bar", "c", "r_bar", "f_active", "recon")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class TrainLog:
    """Row stores for the per-pair and per-interval diagnostic series."""

    def __init__(self):
        self.diag_rows = []
        self.phase_rows = []
        self.epoch_rows = []

    def _write(self, path, columns, rows):
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(_fmt(row[c]) for c in columns))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_diagnostics_csv(self, path):
        self._write(path, DIAG_COLUMNS, self.diag_rows)

    def write_phases_csv(self, path):
        self._write(path, PHASE_COLUMNS, self.phase_rows)


# ---------------------------------------------------------------------------
# shared pieces

def _check_pixels(config: TrainConfig, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != config.image_side ** 2:
        raise ValueError(
            f"training data must be (count, {config.image_side ** 2}), "
            f"got {pixels.shape}")
    if pixels.shape[0] < config.batch_size:
        raise ValueError(
            f"batch_size {config.batch_size} exceeds dataset count "
            f"{pixels.shape[0]}")
    return pixels


def _diag_batch(config: TrainConfig, pixels: np.ndarray) -> np.ndarray:
    return pixels[:min(config.diag_batch, pixels.shape[0])]


def _diag_eval(config, model, stats, cal, diag_x, phase, epoch, log):
    """Measure all pairs on the held batch and append log rows."""
    step = model.params.step
    rng = stream_rng(config.seed, "diag", step)
    b = diag_x.shape[0]
    eps = rng.standard_normal((b, config.latent_dim))
    noise = np.clip(rng.random((b, config.categories)),
                    GUMBEL_CLIP, 1.0 - GUMBEL_CLIP)
    d_vals, delta_vals = diag.evaluate_pairs(model, diag_x, eps, noise)
    for k, (i, j) in enumerate(stats.pairs):
        stats.accumulate(i, j, d_vals[k], delta_vals[k])

    c_now = cal.c if (cal is not None and cal.calibrated()) else float("nan")
    have_c = np.isfinite(c_now)
    r_running = stats.delta_mean / (stats.d_mean + config.eps_num)
    r_fresh = delta_vals / (c_now * d_vals + config.eps_num) if have_c \
        else np.full_like(d_vals, np.nan)
    f_act = diag.active_fraction(stats, c_now) if have_c else float("nan")

    for k, (i, j) in enumerate(stats.pairs):
        log.diag_rows.append({
            "step": step, "phase": phase, "i": i, "j": j,
            "D": d_vals[k], "Delta": delta_vals[k],
            "Dbar": stats.d_mean[k], "Deltabar": stats.delta_mean[k],
            "r": r_running[k], "C": c_now, "R": r_fresh[k],
            "f_active": f_act,
        })
    recon = float(np.mean(evalmetrics.bce_per_image(
        diag_x, model.reconstruct_det(diag_x))))
    log.phase_rows.append({
        "step": step, "phase": phase, "epoch": epoch,
        "d_fresh": float(np.mean(d_vals)),
        "delta_fresh": float(np.mean(delta_vals)),
        "d_bar": float(np.mean(stats.d_mean)),
        "delta_bar": float(np.mean(stats.delta_mean)),
        "c": c_now,
        "r_bar": float(np.mean(r_fresh)) if have_c else float("nan"),
        "f_active": f_act, "recon": recon,
    })


def _train_step(config, model, cal, x, eps, noise, phase):
    pn = model.param_nodes()
    losses = model_mod.build_elbo(model, pn, x, eps, noise,
                                  config.mi_stop_decoder_grad)
    total = losses.total
    if phase == 2 and model.weights.lambda_unc > 0.0:
        total = gc.add(total, diag.hinge_node(model, pn, losses, cal.c,
                                              model.weights.lambda_unc))
    if not np.isfinite(float(total.value)):
        raise NumericalAbort(
            f"non-finite loss at phase {phase}, optimizer step "
            f"{model.params.step + 1}")
    grads = gc.backward(total, wrt=list(pn.values()))
    named = {name: grads[node] for name, node in pn.items()}
    gc.adam_update(model.params, named, config.learning_rate)
    return losses


def _run_epochs(config, model, stats, cal, pixels, diag_x, phase, n_epochs,
                epoch_base, log):
    """Inner loop shared by both phases; epoch_base sets the global index."""
    count = pixels.shape[0]
    bsz = config.batch_size
    steps = count // bsz
    for epoch in range(n_epochs):
        g_epoch = epoch_base + epoch
        order = stream_rng(config.seed, "data_order", g_epoch).permutation(count)
        rng_eps = stream_rng(config.seed, "eps", g_epoch)
        rng_gum = stream_rng(config.seed, "gumbel", g_epoch)
        sums = None
        for s in range(steps):
            idx = order[s * bsz:(s + 1) * bsz]
            eps = rng_eps.standard_normal((bsz, config.latent_dim))
            noise = np.clip(rng_gum.random((bsz, config.categories)),
                            GUMBEL_CLIP, 1.0 - GUMBEL_CLIP)
            losses = _train_step(config, model, cal, pixels[idx], eps, noise,
                                 phase)
            comp = losses.component_values()
            sums = comp if sums is None else \
                {k: sums[k] + v for k, v in comp.items()}
            if model.params.step % config.k_diag == 0:
                _diag_eval(config, model, stats, cal, diag_x, phase,
                           epoch + 1, log)
        log.epoch_rows.append({"phase": phase, "epoch": epoch + 1,
                               **{k: v / steps for k, v in sums.items()}})
        if phase == 2 and epoch + 1 > cal.freeze_epochs:
            f_act = diag.active_fraction(stats, cal.c)
            cal.c = diag.update_c(cal.c, f_act, cal.f_target, cal.eta,
                                  cal.c_min, cal.c_max)
            cal.history.append({"epoch": epoch + 1, "c": cal.c,
                                "f_active": f_act})
    # Guarantee at least one measurement per phase so calibration always
    # has complete pair statistics, without double-logging a step.
    if n_epochs > 0 and model.params.step % config.k_diag != 0:
        _diag_eval(config, model, stats, cal, diag_x, phase, n_epochs, log)


# ---------------------------------------------------------------------------
# public phases

def train_phase1(config: TrainConfig, pixels: np.ndarray,
                 model: model_mod.ModelState | None = None,
                 log: TrainLog | None = None):
    """Unconstrained training plus diagnostic accumulation.

    Returns (model, stats, log). `pixels` is the (count, side^2) float
    image table in [0, 1].
    """
    config.validate()
    pixels = _check_pixels(config, pixels)
    if model is None:
        model = model_mod.ModelState.init(config.model_dims(),
                                          config.loss_weights(),
                                          config.gen_scale,
                                          stream_rng(config.seed, "init"))
    log = log or TrainLog()
    stats = diag.PairStats(config.latent_dim)
    _run_epochs(config, model, stats, None, pixels, _diag_batch(config, pixels),
                phase=1, n_epochs=config.epochs_phase1, epoch_base=0, log=log)
    return model, stats, log


def train_phase2(config: TrainConfig, pixels: np.ndarray,
                 model: model_mod.ModelState, stats: diag.PairStats,
                 log: TrainLog | None = None,
                 cal: diag.CalibrationState | None = None):
    """Hinge fine-tuning with C calibrated at entry and adapted per epoch.

    Returns (model, cal, log). Optimizer moments carry over from phase 1
    unless the config asks for a reset.
    """
    config.validate()
    pixels = _check_pixels(config, pixels)
    log = log or TrainLog()
    if cal is None:
        cal = config.calibration()
    if not cal.calibrated():
        cal.c_emp = diag.calibrate_c(stats, cal.percentile_p, cal.c_min,
                                     cal.c_max, config.eps_num)
        cal.c = cal.c_emp
        cal.history.append({"epoch": 0, "c": cal.c,
                            "f_active": diag.active_fraction(stats, cal.c)})
    if config.reset_moments_phase2:
        model.params.m = {k: np.zeros_like(v) for k, v in
                          model.params.values.items()}
        model.params.v = {k: np.zeros_like(v) for k, v in
                          model.params.values.items()}
    _run_epochs(config, model, stats, cal, pixels,
                _diag_batch(config, pixels), phase=2,
                n_epochs=config.epochs_phase2,
                epoch_base=config.epochs_phase1, log=log)
    return model, cal, log


# ---------------------------------------------------------------------------
# checkpoint round-trip including run state

def save_run_checkpoint(path, model, stats, cal, config: TrainConfig):
    extras = {
        "stats_d_mean": stats.d_mean,
        "stats_delta_mean": stats.delta_mean,
        "stats_count": stats.count,
    }
    if cal is not None:
        extras["cal_values"] = np.array([cal.c, cal.c_emp])
        extras["cal_settings"] = np.array([cal.percentile_p, cal.eta,
                                           cal.f_target, cal.c_min, cal.c_max,
                                           float(cal.freeze_epochs)])
    model_mod.save_checkpoint(path, model, extras=extras,
                              config_json=json.dumps(config.to_dict()))


def load_run_checkpoint(path):
    """Returns (model, stats, cal_or_none, config)."""
    model, extras, config_json = model_mod.load_checkpoint(path)
    config = TrainConfig.from_dict(json.loads(config_json))
    stats = diag.PairStats(model.dims.latent_dim)
    stats.d_mean = np.asarray(extras["stats_d_mean"], dtype=np.float64)
    stats.delta_mean = np.asarray(extras["stats_delta_mean"], dtype=np.float64)
    stats.count = np.asarray(extras["stats_count"], dtype=np.int64)
    cal = None
    if "cal_values" in extras:
        s = extras["cal_settings"]
        cal = diag.CalibrationState(percentile_p=float(s[0]), eta=float(s[1]),
                                    f_target=float(s[2]), c_min=float(s[3]),
                                    c_max=float(s[4]), freeze_epochs=int(s[5]),
                                    c=float(extras["cal_values"][0]),
                                    c_emp=float(extras["cal_values"][1]))
    return model, stats, cal, config


# ---------------------------------------------------------------------------
# full curriculum with run-directory outputs

def _resolve_dataset(config: TrainConfig, out_dir: str):
    if config.data_path:
        if not os.path.exists(config.data_path):
            raise ValueError(f"dataset file not found: {config.data_path}")
        dataset = toydata.load_dataset(config.data_path)
        if dataset.side != config.image_side:
            raise ValueError(
                f"dataset side {dataset.side} does not match configured "
                f"image_side {config.image_side}")
        digest = toydata.save_dataset(dataset, os.path.join(out_dir,
                                                            "dataset.bin"))
        return dataset, digest
    dataset = toydata.generate_dataset(config.data_count, config.image_side,
                                       config.data_seed)
    digest = toydata.save_dataset(dataset, os.path.join(out_dir, "dataset.bin"))
    return dataset, digest


def _json_safe(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def run_curriculum(config: TrainConfig, out_dir: str) -> dict:
    """Execute both phases end to end, writing all run artifacts.

    Produces config.json, dataset.bin, checkpoint.npz, diagnostics.csv,
    phases.csv, and report.json inside `out_dir`, and returns the report.
    On a numerical abort the partial logs and a failure report are still
    written before the error propagates.
    """
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")
    dataset, digest = _resolve_dataset(config, out_dir)
    pixels = dataset.pixels01()

    log = TrainLog()
    model = model_mod.ModelState.init(config.model_dims(),
                                      config.loss_weights(), config.gen_scale,
                                      stream_rng(config.seed, "init"))
    cal = None
    stats = None
    try:
        model, stats, log = train_phase1(config, pixels, model, log)
        if config.epochs_phase2 > 0:
            model, cal, log = train_phase2(config, pixels, model, stats, log)
    except NumericalAbort as err:
        log.write_diagnostics_csv(os.path.join(out_dir, "diagnostics.csv"))
        log.write_phases_csv(os.path.join(out_dir, "phases.csv"))
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump({"status": "failed", "stage": str(err)}, fh, indent=2)
            fh.write("\n")
        raise

    save_run_checkpoint(os.path.join(out_dir, "checkpoint.npz"), model,
                        stats, cal, config)
    log.write_diagnostics_csv(os.path.join(out_dir, "diagnostics.csv"))
    log.write_phases_csv(os.path.join(out_dir, "phases.csv"))

    recon = evalmetrics.reconstruction_error(model, dataset)
    fvm = None
    if config.fvm_votes > 0:
        fvm = evalmetrics.fvm_score(model, dataset, votes=config.fvm_votes,
                                    samples_per_vote=config.fvm_samples,
                                    seed=config.seed)
    pair_rows = []
    if stats is not None and stats.count.min() > 0:
        c_for_r = cal.c if cal is not None else float("nan")
        r_run = stats.delta_mean / (stats.d_mean + config.eps_num)
        if cal is not None:
            r_stab, r_bar = diag.stability_ratio(stats, cal.c, config.eps_num)
            f_act = diag.active_fraction(stats, cal.c)
        else:
            r_stab = np.full_like(stats.d_mean, np.nan)
            r_bar, f_act = float("nan"), float("nan")
        for k, (i, j) in enumerate(stats.pairs):
            pair_rows.append({"i": i, "j": j, "d_bar": stats.d_mean[k],
                              "delta_bar": stats.delta_mean[k],
                              "r": r_run[k], "stability": _json_safe(float(r_stab[k]))})
    else:
        r_bar, f_act = float("nan"), float("nan")

    report = {
        "status": "ok",
        "seed": config.seed,
        "config": config.to_dict(),
        "dataset": {"count": dataset.count, "side": dataset.side,
                    "sha256": digest},
        "phase1": {"epochs": [r for r in log.epoch_rows if r["phase"] == 1]},
        "phase2": {"epochs": [r for r in log.epoch_rows if r["phase"] == 2],
                   "calibration_history": cal.history if cal else []},
        "calibration": {
            "c_emp": _json_safe(cal.c_emp) if cal else None,
            "c_final": _json_safe(cal.c) if cal else None,
        },
        "pairs": pair_rows,
        "f_active": _json_safe(f_act),
        "r_bar": _json_safe(r_bar),
        "metrics": {"reconstruction": recon, "fvm": fvm},
    }
    report = _json_safe(report)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report
