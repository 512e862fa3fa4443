"""Estimator front end over the two-phase curriculum.

LieGroupVAE follows the fit/transform protocol: fit trains both phases on
an image table, transform returns the continuous group coordinates. The
heavy lifting lives in trainer/model; this class only validates input,
holds hyperparameters verbatim, and exposes the fitted state.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import evalmetrics, trainer
from .validation import check_image_batch


class LieGroupVAE(TransformerMixin, BaseEstimator):
    """Two-phase Lie-group VAE with a deformation-stability hinge.

    Parameters mirror TrainConfig; `random_state` is the master seed.
    Images are passed as a (count, side*side) float table in [0, 1] with a
    square side of at least 12 pixels.
    """

    def __init__(self, latent_dim=6, group_size=4, categories=3,
                 hidden_width=256, epochs_phase1=8, epochs_phase2=12,
                 batch_size=64, learning_rate=1e-3, alpha=0.1, beta=0.05,
                 lambda_mi=0.6, lambda_usage=1.0, lambda_unc=0.05,
                 tau=0.67, gen_scale=2e-4, percentile_p=90.0, eta_c=0.05,
                 f_target=0.5, c_min=1e-4, c_max=1e4, freeze_epochs=10,
                 k_diag=25, diag_batch=64, eps_num=1e-8,
                 mi_stop_decoder_grad=False, reset_moments_phase2=False,
                 random_state=0):
        self.latent_dim = latent_dim
        self.group_size = group_size
        self.categories = categories
        self.hidden_width = hidden_width
        self.epochs_phase1 = epochs_phase1
        self.epochs_phase2 = epochs_phase2
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.alpha = alpha
        self.beta = beta
        self.lambda_mi = lambda_mi
        self.lambda_usage = lambda_usage
        self.lambda_unc = lambda_unc
        self.tau = tau
        self.gen_scale = gen_scale
        self.percentile_p = percentile_p
        self.eta_c = eta_c
        self.f_target = f_target
        self.c_min = c_min
        self.c_max = c_max
        self.freeze_epochs = freeze_epochs
        self.k_diag = k_diag
        self.diag_batch = diag_batch
        self.eps_num = eps_num
        self.mi_stop_decoder_grad = mi_stop_decoder_grad
        self.reset_moments_phase2 = reset_moments_phase2
        self.random_state = random_state

    def _config(self, side: int, count: int) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            seed=self.random_state, image_side=side,
            latent_dim=self.latent_dim, group_size=self.group_size,
            categories=self.categories, hidden_width=self.hidden_width,
            epochs_phase1=self.epochs_phase1,
            epochs_phase2=self.epochs_phase2, batch_size=self.batch_size,
            learning_rate=self.learning_rate, alpha=self.alpha,
            beta=self.beta, lambda_mi=self.lambda_mi,
            lambda_usage=self.lambda_usage, lambda_unc=self.lambda_unc,
            tau=self.tau, gen_scale=self.gen_scale,
            percentile_p=self.percentile_p, eta_c=self.eta_c,
            f_target=self.f_target, c_min=self.c_min, c_max=self.c_max,
            freeze_epochs=self.freeze_epochs, k_diag=self.k_diag,
            diag_batch=self.diag_batch, eps_num=self.eps_num,
            mi_stop_decoder_grad=self.mi_stop_decoder_grad,
            reset_moments_phase2=self.reset_moments_phase2,
            data_count=count).validate()

    @staticmethod
    def _side_of(X) -> int:
        X = np.asarray(X)
        if X.ndim != 2:
            raise ValueError(f"expected a 2d image table, got shape {X.shape}")
        side = math.isqrt(X.shape[1])
        if side * side != X.shape[1]:
            raise ValueError(
                f"{X.shape[1]} pixels per row is not a square image")
        return side

    def fit(self, X, y=None):
        side = self._side_of(X)
        X = check_image_batch(X, side)
        config = self._config(side, X.shape[0])
        model, stats, log = trainer.train_phase1(config, X)
        cal = None
        if config.epochs_phase2 > 0:
            model, cal, log = trainer.train_phase2(config, X, model, stats,
                                                   log)
        self.model_ = model
        self.stats_ = stats
        self.calibration_ = cal
        self.log_ = log
        self.side_ = side
        self.n_features_in_ = side * side
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this LieGroupVAE instance is not fitted yet; call fit first")

    def _validate(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_image_batch(X, self.side_)
        return X

    def transform(self, X) -> np.ndarray:
        """Posterior means of the group coordinates, one row per image."""
        X = self._validate(X)
        _, mu, _, _ = self.model_.encode_det(X)
        return mu

    def reconstruct(self, X) -> np.ndarray:
        """Deterministic reconstructions at t = mu with the hard code."""
        X = self._validate(X)
        return self.model_.reconstruct_det(X)

    def score(self, X, y=None) -> float:
        """Negative mean per-image reconstruction cross-entropy."""
        X = self._validate(X)
        return -float(np.mean(evalmetrics.bce_per_image(
            X, self.model_.reconstruct_det(X))))
