"""Networks, latent sampling, loss graphs, and checkpoint round-trip.

The pipeline: an image encoder produces a flat code zhat of length n^2, a
linear group head maps it to the posterior (mu, logvar) over the d group
coefficients, t is sampled by reparameterization, and z = vec(exp(A(t)))
ties the code to the group. A separate discrete encoder yields category
logits whose Gumbel-Softmax sample picks an embedding e_s; the decoder
sees s' = G(t) acting on e_s. Training uses the soft discrete code,
deterministic evaluation uses the noise-free argmax.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from . import liegroup
from .errors import DimensionError
from .validation import check_image_batch

LOGVAR_CLAMP = 10.0
BCE_EPS = 1e-7
LOG_EPS = 1e-12


@dataclass(frozen=True)
class ModelDims:
    side: int
    latent_dim: int      # d, number of generators
    group_size: int      # n, generators are n x n
    categories: int      # K, discrete code size
    hidden: int

    @property
    def pixels(self) -> int:
        return self.side * self.side

    @property
    def code_len(self) -> int:
        return self.group_size * self.group_size

    def validate(self) -> "ModelDims":
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be at least 2")
        for name in ("side", "group_size", "categories", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        return self


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_mi: float = 0.6
    lambda_usage: float = 0.001
    lambda_unc: float = 0.05
    tau: float = 0.67

    def validate(self) -> "LossWeights":
        for name in ("alpha", "beta", "lambda_mi", "lambda_usage", "lambda_unc"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        return self


def _dense_block(rng, prefix, in_dim, hidden, out):
    """Parameter dict for a 2-hidden-layer dense net prefix.{w,b}{1,2,3}."""
    w = {}
    dims = [in_dim, hidden, hidden, out]
    for k in range(3):
        fan_in, fan_out = dims[k], dims[k + 1]
        w[f"{prefix}.w{k + 1}"] = rng.normal(
            0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        w[f"{prefix}.b{k + 1}"] = np.zeros(fan_out)
    return w


class ModelState:
    """Trainable parameters plus the static dimensions and loss weights."""

    def __init__(self, dims: ModelDims, weights: LossWeights,
                 params: gc.ParameterSet):
        self.dims = dims.validate()
        self.weights = weights.validate()
        self.params = params

    @classmethod
    def init(cls, dims: ModelDims, weights: LossWeights, gen_scale: float,
             rng: np.random.Generator) -> "ModelState":
        dims.validate()
        p, h, m, k = dims.pixels, dims.hidden, dims.code_len, dims.categories
        values = {}
        values.update(_dense_block(rng, "enc", p, h, m))
        values.update(_dense_block(rng, "dsc", p, h, k))
        values.update(_dense_block(rng, "dec", m, h, p))
        values.update(_dense_block(rng, "mi", p, h, k))
        # Zero-initialized group head: the posterior starts at N(0, I).
        values["grp.w"] = np.zeros((m, 2 * dims.latent_dim))
        values["grp.b"] = np.zeros(2 * dims.latent_dim)
        values["emb.table"] = rng.normal(0.0, 0.3, size=(k, m))
        values["gen"] = liegroup.init_generators(
            dims.latent_dim, dims.group_size, gen_scale, rng).generators
        return cls(dims, weights, gc.ParameterSet(values))

    # ------------------------------------------------------------------
    # graph builders

    def param_nodes(self, trainable: bool = True) -> dict:
        if trainable:
            return self.params.nodes()
        return {k: gc.constant(v, name=k) for k, v in self.params.values.items()}

    def _net(self, pn, prefix, x, out_activation=None):
        h1 = gc.tanh_(gc.add(gc.matmul(x, pn[f"{prefix}.w1"]), pn[f"{prefix}.b1"]))
        h2 = gc.tanh_(gc.add(gc.matmul(h1, pn[f"{prefix}.w2"]), pn[f"{prefix}.b2"]))
        out = gc.add(gc.matmul(h2, pn[f"{prefix}.w3"]), pn[f"{prefix}.b3"])
        return out_activation(out) if out_activation else out

    def encode(self, pn, x: gc.Node):
        """Graph nodes (zhat, mu, logvar, logits) for a batch of images."""
        d = self.dims.latent_dim
        zhat = self._net(pn, "enc", x)
        head = gc.add(gc.matmul(zhat, pn["grp.w"]), pn["grp.b"])
        mu = gc.slice_(head, 1, 0, d)
        logvar = clamp(gc.slice_(head, 1, d, 2 * d), -LOGVAR_CLAMP, LOGVAR_CLAMP)
        logits = self._net(pn, "dsc", x)
        return zhat, mu, logvar, logits

    def decode(self, pn, s: gc.Node) -> gc.Node:
        return self._net(pn, "dec", s, out_activation=gc.sigmoid_)

    def mi_logits(self, pn, x_rec: gc.Node) -> gc.Node:
        return self._net(pn, "mi", x_rec)

    def generator_bank(self) -> liegroup.GeneratorBank:
        return liegroup.GeneratorBank(self.params.values["gen"])

    # ------------------------------------------------------------------
    # deterministic numpy-facing evaluation

    def encode_det(self, x: np.ndarray):
        """Noise-free encoder pass: (zhat, mu, logvar, logits) as arrays."""
        x = check_image_batch(x, self.dims.side)
        pn = self.param_nodes(trainable=False)
        zhat, mu, logvar, logits = self.encode(pn, gc.constant(x))
        return zhat.value, mu.value, logvar.value, logits.value

    def decode_det(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[1] != self.dims.code_len:
            raise DimensionError(
                f"decoder input must have {self.dims.code_len} columns, "
                f"got {s.shape[1]}")
        pn = self.param_nodes(trainable=False)
        return self.decode(pn, gc.constant(s)).value

    def embed_hard(self, hard: np.ndarray) -> np.ndarray:
        return np.asarray(hard, dtype=np.float64) @ self.params.values["emb.table"]

    @property
    def generators(self) -> np.ndarray:
        return self.params.values["gen"]

    def reconstruct_det(self, x: np.ndarray) -> np.ndarray:
        """Reconstructions at t = mu with the noise-free hard discrete code."""
        _, mu, _, logits = self.encode_det(x)
        hard = one_hot(np.argmax(logits, axis=1), self.dims.categories)
        g = liegroup.group_element(self.generator_bank(), mu)
        s = liegroup.act(g, self.embed_hard(hard))
        return self.decode_det(s)


def clamp(x: gc.Node, lo: float, hi: float) -> gc.Node:
    """Differentiable clamp built from rectifiers."""
    return gc.sub(gc.add(gc.relu_(gc.sub(x, lo)), lo), gc.relu_(gc.sub(x, hi)))


def one_hot(idx: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((np.size(idx), k))
    out[np.arange(np.size(idx)), np.asarray(idx).reshape(-1)] = 1.0
    return out


def reparameterize(mu: gc.Node, logvar: gc.Node, eps: np.ndarray) -> gc.Node:
    """t = mu + sigma * eps with sigma = exp(logvar / 2)."""
    if np.shape(eps) != mu.value.shape:
        raise DimensionError(
            f"eps shape {np.shape(eps)} does not match mu {mu.value.shape}")
    sigma = gc.exp_(gc.mul(logvar, 0.5))
    return gc.add(mu, gc.mul(sigma, gc.constant(eps)))


@dataclass
class DiscreteCode:
    logits: gc.Node
    soft: gc.Node        # rows on the simplex
    hard: np.ndarray     # one-hot at the argmax of soft


def gumbel_softmax(logits: gc.Node, tau: float, noise: np.ndarray) -> DiscreteCode:
    """Concrete relaxation: soft = softmax((logits + g) / tau).

    `noise` holds uniforms strictly inside (0, 1); g = -log(-log(noise)).
    The hard code is the one-hot argmax of the soft sample.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != logits.value.shape:
        raise DimensionError(
            f"noise shape {noise.shape} does not match logits "
            f"{logits.value.shape}")
    if noise.min() <= 0.0 or noise.max() >= 1.0:
        raise ValueError("gumbel noise must lie strictly inside (0, 1)")
    g = -np.log(-np.log(noise))
    soft = gc.softmax_t(gc.add(logits, gc.constant(g)), tau)
    hard = one_hot(np.argmax(soft.value, axis=1), soft.value.shape[1])
    return DiscreteCode(logits=logits, soft=soft, hard=hard)


# ---------------------------------------------------------------------------
# loss graphs

def bce_node(x_rec: gc.Node, x: gc.Node, batch: int) -> gc.Node:
    """Bernoulli reconstruction loss, summed over pixels, mean over batch."""
    xc = gc.add(gc.mul(x_rec, 1.0 - 2.0 * BCE_EPS), BCE_EPS)
    ll = gc.add(gc.mul(x, gc.log_(xc)),
                gc.mul(gc.sub(1.0, x), gc.log_(gc.sub(1.0, xc))))
    return gc.mul(gc.sum_(ll), -1.0 / batch)


def kl_node(mu: gc.Node, logvar: gc.Node, batch: int) -> gc.Node:
    """KL(q(t|x) || N(0, I)), mean over batch."""
    var = gc.exp_(logvar)
    inner = gc.sub(gc.sub(gc.add(gc.square(mu), var), 1.0), logvar)
    return gc.mul(gc.sum_(inner), 0.5 / batch)


def mi_loss_node(soft: gc.Node, pred_logits: gc.Node, batch: int) -> gc.Node:
    """Cross-entropy of the predictor against the soft code, batch mean."""
    logq = gc.log_(gc.add(gc.softmax_t(pred_logits, 1.0), LOG_EPS))
    return gc.mul(gc.sum_(gc.mul(soft, logq)), -1.0 / batch)


def usage_loss_node(soft: gc.Node) -> gc.Node:
    """log K minus the entropy of the batch-mean soft code; zero iff uniform."""
    k = soft.value.shape[1]
    pbar = gc.mean_(soft, axis=0)
    ent = gc.sum_(gc.mul(pbar, gc.log_(gc.add(pbar, LOG_EPS))))
    return gc.add(ent, float(np.log(k)))


@dataclass
class LossNodes:
    """Phase-1 objective with the intermediates phase 2 builds on."""

    total: gc.Node
    recon: gc.Node
    consistency: gc.Node
    kl: gc.Node
    mi: gc.Node
    usage: gc.Node
    t: gc.Node
    zhat: gc.Node
    mu: gc.Node
    logvar: gc.Node
    code: DiscreteCode
    s_prime: gc.Node

    def component_values(self) -> dict:
        return {name: float(getattr(self, name).value)
                for name in ("total", "recon", "consistency", "kl", "mi", "usage")}


def build_elbo(model: ModelState, pn: dict, x: np.ndarray, eps: np.ndarray,
               noise: np.ndarray, mi_stop_decoder_grad: bool = False) -> LossNodes:
    """Full unconstrained training graph for one batch.

    x is a (b, pixels) float batch; eps and noise are the pre-drawn
    reparameterization and Gumbel noise arrays for this batch.
    """
    w = model.weights
    b = x.shape[0]
    xn = gc.constant(x, name="x")
    zhat, mu, logvar, logits = model.encode(pn, xn)
    t = reparameterize(mu, logvar, eps)
    code = gumbel_softmax(logits, w.tau, noise)
    g = liegroup.group_element_node(pn["gen"], t)
    z = gc.reshape_(g, (b, model.dims.code_len))
    e_s = gc.matmul(code.soft, pn["emb.table"])
    s_prime = liegroup.act_node(g, e_s)
    x_rec = model.decode(pn, s_prime)

    recon = bce_node(x_rec, xn, b)
    consistency = gc.mul(gc.frob_sq(gc.sub(z, zhat)), 1.0 / b)
    kl = kl_node(mu, logvar, b)
    mi_in = gc.detach(x_rec) if mi_stop_decoder_grad else x_rec
    mi = mi_loss_node(code.soft, model.mi_logits(pn, mi_in), b)
    usage = usage_loss_node(code.soft)

    total = gc.add(recon, gc.mul(consistency, w.alpha))
    total = gc.add(total, gc.mul(kl, w.beta))
    if w.lambda_mi:
        total = gc.add(total, gc.mul(mi, w.lambda_mi))
    if w.lambda_usage:
        total = gc.add(total, gc.mul(usage, w.lambda_usage))
    return LossNodes(total=total, recon=recon, consistency=consistency, kl=kl,
                     mi=mi, usage=usage, t=t, zhat=zhat, mu=mu, logvar=logvar,
                     code=code, s_prime=s_prime)


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(path: str, model: ModelState, extras: dict | None = None,
                    config_json: str = "") -> None:
    """Write parameters, optimizer moments, and run state to one npz file."""
    payload = {
        "dims": np.array([model.dims.side, model.dims.latent_dim,
                          model.dims.group_size, model.dims.categories,
                          model.dims.hidden], dtype=np.int64),
        "weights": np.array([model.weights.alpha, model.weights.beta,
                             model.weights.lambda_mi, model.weights.lambda_usage,
                             model.weights.lambda_unc, model.weights.tau]),
        "adam_step": np.array(model.params.step, dtype=np.int64),
        "config_json": np.frombuffer(config_json.encode("utf-8"), dtype=np.uint8),
    }
    for key, val in model.params.values.items():
        payload[f"param/{key}"] = val
        payload[f"adam_m/{key}"] = model.params.m[key]
        payload[f"adam_v/{key}"] = model.params.v[key]
    for key, val in (extras or {}).items():
        payload[f"extra/{key}"] = np.asarray(val)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    """Inverse of `save_checkpoint`: (model, extras, config_json)."""
    with np.load(path, allow_pickle=False) as data:
        dims_arr = data["dims"]
        dims = ModelDims(side=int(dims_arr[0]), latent_dim=int(dims_arr[1]),
                         group_size=int(dims_arr[2]), categories=int(dims_arr[3]),
                         hidden=int(dims_arr[4]))
        warr = data["weights"]
        weights = LossWeights(alpha=float(warr[0]), beta=float(warr[1]),
                              lambda_mi=float(warr[2]), lambda_usage=float(warr[3]),
                              lambda_unc=float(warr[4]), tau=float(warr[5]))
        values, m, v, extras = {}, {}, {}, {}
        for key in data.files:
            if key.startswith("param/"):
                values[key[6:]] = data[key]
            elif key.startswith("adam_m/"):
                m[key[7:]] = data[key]
            elif key.startswith("adam_v/"):
                v[key[7:]] = data[key]
            elif key.startswith("extra/"):
                extras[key[6:]] = data[key]
        params = gc.ParameterSet(values)
        params.m = {k: np.asarray(arr, dtype=np.float64) for k, arr in m.items()}
        params.v = {k: np.asarray(arr, dtype=np.float64) for k, arr in v.items()}
        params.step = int(data["adam_step"])
        config_json = bytes(data["config_json"]).decode("utf-8")
    return ModelState(dims, weights, params), extras, config_json
