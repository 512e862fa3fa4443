"""Run-level evaluation: reconstruction error and factor identifiability.

The factor-vote metric (fvm_score) checks whether each ground-truth factor
of the toy renderer maps onto a single representation dimension. For each
vote a batch is synthesized with one factor held fixed; the representation
dimension with the smallest normalized variance gets the vote. A majority
classifier is fit on one set of votes and scored on an independent set, so
an uninformative representation scores near 1/num_factors instead of
inheriting the max-of-counts bias.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import toydata
from .seeding import stream_rng
from .validation import as_float_array

BCE_CLIP = 1e-7
MIN_VOTES = 10


def bce_per_image(x: np.ndarray, x_rec: np.ndarray) -> np.ndarray:
    """Summed-over-pixels Bernoulli cross-entropy, one value per row."""
    x = as_float_array(x, "x")
    x_rec = as_float_array(x_rec, "x_rec")
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    p = BCE_CLIP + (1.0 - 2.0 * BCE_CLIP) * x_rec
    return -np.sum(x * np.log(p) + (1.0 - x) * np.log(1.0 - p), axis=-1)


def reconstruction_error(model, dataset) -> float:
    """Mean per-image reconstruction cross-entropy at t = mu, hard code."""
    x = dataset.pixels01() if hasattr(dataset, "pixels01") else \
        as_float_array(dataset, "dataset")
    return float(np.mean(bce_per_image(x, model.reconstruct_det(x))))


def _representation_fn(model, include_discrete: bool):
    """Adapter (images, labels) -> rows for the three accepted model kinds.

    Plain callables see only the images. A callable taking two positional
    arguments also receives the ground-truth factor labels, which makes
    oracle representations (the labels themselves) expressible.
    """
    if callable(model) and not hasattr(model, "encode_det"):
        try:
            n_args = len(inspect.signature(model).parameters)
        except (TypeError, ValueError):
            n_args = 1
        if n_args >= 2:
            return lambda imgs, labels: np.asarray(model(imgs, labels),
                                                   dtype=np.float64)
        return lambda imgs, labels: np.asarray(model(imgs), dtype=np.float64)

    def encode(imgs, labels):
        _, mu, _, logits = model.encode_det(imgs)
        if not include_discrete:
            return mu
        hard = np.zeros_like(logits)
        hard[np.arange(logits.shape[0]), np.argmax(logits, axis=1)] = 1.0
        return np.concatenate([mu, hard], axis=1)

    return encode


def _collect_votes(encode, side, std, votes, samples_per_vote, rng):
    counts = np.zeros((toydata.NUM_FACTORS, std.size), dtype=np.int64)
    for _ in range(votes):
        k = int(rng.integers(toydata.NUM_FACTORS))
        labels = toydata.sample_factors(rng, samples_per_vote)
        labels[:, k] = labels[0, k]
        imgs = toydata.render_batch(labels, side)
        # Match the quantization of stored datasets.
        flat = np.round(imgs * 255.0) / 255.0
        flat = flat.reshape(samples_per_vote, side * side)
        z = encode(flat, labels) / std
        counts[k, int(np.argmin(z.var(axis=0)))] += 1
    return counts


def fvm_score(model, dataset, votes: int = 500, samples_per_vote: int = 64,
              seed: int = 0, include_discrete: bool = False) -> float:
    """Factor-vote identifiability in [0, 1]; higher is better.

    `model` is anything with encode_det, a callable mapping an image batch
    to representation rows, or a callable taking (images, labels) for
    oracle representations. `dataset` supplies the scale used to
    normalize each representation dimension.
    """
    if votes < MIN_VOTES:
        raise ValueError(f"votes must be at least {MIN_VOTES}, got {votes}")
    if samples_per_vote < 2:
        raise ValueError("samples_per_vote must be at least 2")
    side = dataset.side if hasattr(dataset, "side") else None
    x = dataset.pixels01() if hasattr(dataset, "pixels01") else \
        as_float_array(dataset, "dataset")
    labels = dataset.labels if hasattr(dataset, "labels") else None
    if side is None:
        side = int(round(np.sqrt(x.shape[1])))
    if x.shape[0] < 2:
        raise ValueError("need at least 2 dataset rows to estimate scales")

    encode = _representation_fn(model, include_discrete)
    z_all = np.asarray(encode(x, labels), dtype=np.float64)
    if z_all.ndim != 2:
        raise ValueError("representation must be a 2d batch")
    std = z_all.std(axis=0)
    std[std == 0.0] = 1.0

    rng = stream_rng(seed, "fvm")
    train = _collect_votes(encode, side, std, votes, samples_per_vote, rng)
    classify = np.argmax(train, axis=0)
    held = _collect_votes(encode, side, std, votes, samples_per_vote, rng)
    hits = sum(int(held[classify[dim], dim]) for dim in range(std.size))
    return hits / float(held.sum())
