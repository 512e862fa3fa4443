"""Non-commutativity diagnostics, calibration, and the stability hinge.

Two measurements are made per generator pair (i, j), always with i < j:

* the algebraic deviation D_ij = ||exp(t_i A_i + t_j A_j) -
  exp(t_i A_i) exp(t_j A_j)||_F, which vanishes iff the pair commutes on
  the sampled directions, and
* the decoder-level deviation Delta_ij = ||dec(G_i G_j Ghat e_s) -
  dec(G_j G_i Ghat e_s)||_2 with Ghat the matrix form of the encoder code,
  measuring how much the output actually moves when the order is swapped.

The two live in different spaces, so a cross-space constant C is
calibrated from the empirical ratio distribution; the fine-tuning hinge
then penalizes pairs whose decoder deviation falls below C times their
algebraic one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from . import liegroup, matcore
from .errors import InvalidStateError
from .validation import as_vector, check_index

FD_STEP = 1e-4


class PairStats:
    """Running means of (D, Delta) per generator pair, canonical order."""

    def __init__(self, d: int):
        if d < 2:
            raise ValueError("need at least 2 generators for pair statistics")
        self.d = d
        self.pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
        self._index = {p: k for k, p in enumerate(self.pairs)}
        n = len(self.pairs)
        self.d_mean = np.zeros(n)
        self.delta_mean = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def accumulate(self, i: int, j: int, d_value: float, delta_value: float):
        """Fold one evaluation into the running means for pair (i, j)."""
        key = (int(i), int(j))
        if key not in self._index:
            raise ValueError(f"pair {key} is not canonical for d={self.d}")
        d_value, delta_value = float(d_value), float(delta_value)
        if not (np.isfinite(d_value) and np.isfinite(delta_value)):
            raise ValueError("pair statistics must be finite")
        if d_value < 0.0 or delta_value < 0.0:
            raise ValueError("pair statistics must be non-negative")
        k = self._index[key]
        self.count[k] += 1
        self.d_mean[k] += (d_value - self.d_mean[k]) / self.count[k]
        self.delta_mean[k] += (delta_value - self.delta_mean[k]) / self.count[k]

    def require_complete(self):
        if (self.count == 0).any():
            missing = [p for p, c in zip(self.pairs, self.count) if c == 0]
            raise InvalidStateError(
                f"pairs {missing} have no accumulated diagnostics")

    def as_arrays(self):
        return self.d_mean.copy(), self.delta_mean.copy(), self.count.copy()


@dataclass
class CalibrationState:
    """Cross-space constant C with its bounds and adaptation settings."""

    percentile_p: float = 90.0
    eta: float = 0.05
    f_target: float = 0.5
    c_min: float = 1e-4
    c_max: float = 1e4
    freeze_epochs: int = 10
    c: float = float("nan")
    c_emp: float = float("nan")
    history: list = field(default_factory=list)

    def calibrated(self) -> bool:
        return bool(np.isfinite(self.c))


# ---------------------------------------------------------------------------
# the two deviation measurements (numpy)

def bch_deviation(bank: liegroup.GeneratorBank, i: int, j: int, t) -> float:
    """Algebraic deviation D_ij for one latent sample t."""
    i = check_index(i, bank.d, "i")
    j = check_index(j, bank.d, "j")
    if i >= j:
        raise ValueError(f"pair must satisfy i < j, got ({i}, {j})")
    t = as_vector(t, "t")
    if t.size != bank.d:
        raise ValueError(f"t has {t.size} entries for d={bank.d}")
    ai = t[i] * bank.generators[i]
    aj = t[j] * bank.generators[j]
    joint = matcore.mat_exp(ai + aj)
    split = matcore.mat_exp(ai) @ matcore.mat_exp(aj)
    return matcore.frobenius_norm(joint - split)


def order_swap_delta(model, x: np.ndarray, i: int, j: int, eps: np.ndarray,
                     noise: np.ndarray) -> float:
    """Decoder-level deviation Delta_ij averaged over the batch.

    eps and noise are pre-drawn arrays, shapes (b, d) and (b, K); the same
    t sample and the same sampled discrete code serve both orderings.
    """
    d_all, delta_all = evaluate_pairs(model, x, eps, noise, pairs=[(i, j)])
    return float(delta_all[0])


def _sampled_state(model, x, eps, noise):
    zhat, mu, logvar, logits = model.encode_det(x)
    t = mu + np.exp(0.5 * logvar) * eps
    g = -np.log(-np.log(noise))
    scaled = (logits + g) / model.weights.tau
    scaled -= scaled.max(axis=1, keepdims=True)
    soft = np.exp(scaled)
    soft /= soft.sum(axis=1, keepdims=True)
    hard = np.zeros_like(soft)
    hard[np.arange(soft.shape[0]), np.argmax(soft, axis=1)] = 1.0
    return zhat, t, model.embed_hard(hard)


def evaluate_pairs(model, x, eps, noise, pairs=None):
    """Batch-mean (D, Delta) for each pair, vectorized over the batch.

    Returns two arrays aligned with `pairs` (canonical order when omitted).
    One t sample per image serves every pair, so the algebraic and decoder
    deviations of a pair come from the same draw.
    """
    gens = np.asarray(model.generators, dtype=np.float64)
    d, n = gens.shape[0], gens.shape[1]
    if pairs is None:
        pairs = [(a, b) for a in range(d) for b in range(a + 1, d)]
    zhat, t, e = _sampled_state(model, x, eps, noise)
    b, p = t.shape[0], len(pairs)

    idx_i = np.array([a for a, _ in pairs])
    idx_j = np.array([c for _, c in pairs])
    ti = t[:, idx_i]                      # (b, p)
    tj = t[:, idx_j]
    ai = gens[idx_i][None]                # (1, p, n, n)
    aj = gens[idx_j][None]
    term_i = ti[..., None, None] * ai     # (b, p, n, n)
    term_j = tj[..., None, None] * aj

    exp_sum = matcore.mat_exp_batch((term_i + term_j).reshape(-1, n, n))
    exp_i = matcore.mat_exp_batch(term_i.reshape(-1, n, n)).reshape(b, p, n, n)
    exp_j = matcore.mat_exp_batch(term_j.reshape(-1, n, n)).reshape(b, p, n, n)
    diff = exp_sum.reshape(b, p, n, n) - exp_i @ exp_j
    d_vals = np.sqrt(np.sum(diff * diff, axis=(-2, -1))).mean(axis=0)

    ghat = liegroup.mat(zhat)[:, None]    # (b, 1, n, n)
    e_mat = liegroup.mat(e)[:, None]
    s_ij = (exp_i @ exp_j @ ghat @ e_mat).reshape(b * p, n * n)
    s_ji = (exp_j @ exp_i @ ghat @ e_mat).reshape(b * p, n * n)
    x_ij = model.decode_det(s_ij)
    x_ji = model.decode_det(s_ji)
    gap = x_ij - x_ji
    delta_vals = np.sqrt(np.sum(gap * gap, axis=1)).reshape(b, p).mean(axis=0)
    return d_vals, delta_vals


# ---------------------------------------------------------------------------
# calibration and the hinge

def scale_ratios(stats: PairStats, eps: float) -> np.ndarray:
    """Per-pair ratio r_ij = Delta_bar / (D_bar + eps), canonical order."""
    stats.require_complete()
    return stats.delta_mean / (stats.d_mean + eps)


def calibrate_c(stats: PairStats, percentile_p: float, c_min: float,
                c_max: float, eps: float) -> float:
    """Empirical C: a high percentile of the ratio distribution, clamped."""
    ratios = scale_ratios(stats, eps)
    c = matcore.percentile(ratios, percentile_p)
    return float(min(max(c, c_min), c_max))


def hinge_loss(stats: PairStats, c: float, lambda_unc: float) -> float:
    """Mean squared hinge over pairs: positive iff some pair is active."""
    margins = np.maximum(c * stats.d_mean - stats.delta_mean, 0.0)
    return float(lambda_unc * np.mean(margins * margins))


def active_fraction(stats: PairStats, c: float) -> float:
    """Fraction of pairs with C * D_bar strictly above Delta_bar."""
    return float(np.mean(c * stats.d_mean > stats.delta_mean))


def update_c(c: float, f_active: float, f_target: float, eta: float,
             c_min: float, c_max: float) -> float:
    """Multiplicative C adaptation toward the target active fraction."""
    c = c * float(np.exp(eta * (f_target - f_active)))
    return float(min(max(c, c_min), c_max))


def stability_ratio(stats: PairStats, c: float, eps: float):
    """Per-pair R_ij = Delta_bar / (C * D_bar + eps) and their mean."""
    stats.require_complete()
    r = stats.delta_mean / (c * stats.d_mean + eps)
    return r, float(np.mean(r))


# ---------------------------------------------------------------------------
# decoder sensitivity

def manifold_sensitivity(model, x, i: int, j: int, h: float = FD_STEP) -> float:
    """Largest singular value of the two decoder Jacobian columns (i, j).

    Columns are central finite differences of the map t -> dec(G(t) e_s)
    taken at the posterior mean with the hard discrete code frozen.
    """
    if h <= 0.0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, mu, _, logits = model.encode_det(x)
    gens = np.asarray(model.generators)
    i = check_index(i, gens.shape[0], "i")
    j = check_index(j, gens.shape[0], "j")
    if i == j:
        raise ValueError("sensitivity needs two distinct directions")
    k = logits.shape[1]
    hard = np.zeros(k)
    hard[int(np.argmax(logits[0]))] = 1.0
    e = model.embed_hard(hard[None])[0]
    bank = liegroup.GeneratorBank(gens)
    t0 = mu[0]

    def image_at(tv):
        s = liegroup.act(liegroup.group_element(bank, tv), e)
        return model.decode_det(s[None])[0]

    cols = []
    for axis in (i, j):
        plus, minus = t0.copy(), t0.copy()
        plus[axis] += h
        minus[axis] -= h
        cols.append((image_at(plus) - image_at(minus)) / (2.0 * h))
    return matcore.two_column_sigma_max(cols[0], cols[1])


# ---------------------------------------------------------------------------
# graph builders for the fine-tuning hinge

def bch_deviation_node(gens: gc.Node, i: int, j: int, t: gc.Node) -> gc.Node:
    """Differentiable D_ij for a single latent sample node t of shape (d,)."""
    ti = gc.pick(t, 0, i)
    tj = gc.pick(t, 0, j)
    ai = gc.mul(ti, liegroup.generator_slice(gens, i))
    aj = gc.mul(tj, liegroup.generator_slice(gens, j))
    joint = liegroup.mat_exp_node(gc.add(ai, aj))
    split = gc.matmul(liegroup.mat_exp_node(ai), liegroup.mat_exp_node(aj))
    return gc.sqrt_(gc.frob_sq(gc.sub(joint, split)))


def order_swap_node(model, pn, i: int, j: int, t: gc.Node, zhat0: gc.Node,
                    e0: gc.Node) -> gc.Node:
    """Differentiable Delta_ij for one sample; t, zhat0, e0 are flat nodes."""
    n = model.dims.group_size
    ti = gc.pick(t, 0, i)
    tj = gc.pick(t, 0, j)
    gi = liegroup.mat_exp_node(gc.mul(ti, liegroup.generator_slice(pn["gen"], i)))
    gj = liegroup.mat_exp_node(gc.mul(tj, liegroup.generator_slice(pn["gen"], j)))
    ghat = gc.reshape_(zhat0, (n, n))
    e_mat = gc.reshape_(e0, (n, n))
    s_ij = gc.reshape_(gc.matmul(gc.matmul(gc.matmul(gi, gj), ghat), e_mat), (1, n * n))
    s_ji = gc.reshape_(gc.matmul(gc.matmul(gc.matmul(gj, gi), ghat), e_mat), (1, n * n))
    gap = gc.sub(model.decode(pn, s_ij), model.decode(pn, s_ji))
    return gc.sqrt_(gc.frob_sq(gap))


def hinge_node(model, pn, losses, c: float, lambda_unc: float) -> gc.Node:
    """Squared-hinge penalty from fresh single-sample in-graph deviations.

    Uses sample 0 of the batch already encoded in `losses`, so gradients
    reach the decoder, the generators, and the embedding.
    """
    if not np.isfinite(c):
        raise InvalidStateError("hinge requires a calibrated C")
    d = model.dims.latent_dim
    t0 = gc.pick(losses.t, 0, 0)
    zhat0 = gc.pick(losses.zhat, 0, 0)
    hard0 = gc.constant(losses.code.hard[0:1])
    e0 = gc.reshape_(gc.matmul(hard0, pn["emb.table"]), (model.dims.code_len,))
    pairs = [(a, b) for a in range(d) for b in range(a + 1, d)]
    total = None
    for i, j in pairs:
        dev = bch_deviation_node(pn["gen"], i, j, t0)
        swap = order_swap_node(model, pn, i, j, t0, zhat0, e0)
        term = gc.square(gc.relu_(gc.sub(gc.mul(dev, c), swap)))
        total = term if total is None else gc.add(total, term)
    return gc.mul(total, lambda_unc / len(pairs))
