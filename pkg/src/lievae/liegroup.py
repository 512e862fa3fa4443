"""Generator banks and one-parameter-group machinery.

A bank holds d square generators. A latent vector t picks the algebra
element A(t) = sum_j t_j A_j, and the group element is exp(A(t)). Flat
vectors of length n^2 are treated as n x n matrices in row-major order;
the group acts on them by left multiplication.

Most helpers come in two forms: a plain numpy one for diagnostics and
evaluation, and a `_node` one that builds a differentiable graph.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as gc
from . import matcore
from .errors import DimensionError
from .validation import as_float_array


class GeneratorBank:
    """Stack of d trainable n x n generator matrices."""

    def __init__(self, generators):
        arr = as_float_array(generators, "generators")
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise DimensionError(
                f"generators must have shape (d, n, n), got {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("a bank needs at least 2 generators")
        self.generators = arr

    @property
    def d(self) -> int:
        return self.generators.shape[0]

    @property
    def n(self) -> int:
        return self.generators.shape[1]

    def pairs(self) -> list:
        """Canonical ordering of unordered generator pairs."""
        return [(i, j) for i in range(self.d) for j in range(i + 1, self.d)]


def init_generators(d: int, n: int, scale: float, seed) -> GeneratorBank:
    """Bank with independent Gaussian entries of standard deviation `scale`."""
    if d < 2:
        raise ValueError("a bank needs at least 2 generators")
    if n < 1:
        raise ValueError(f"matrix size must be positive, got {n}")
    if scale <= 0.0:
        raise ValueError(f"init scale must be positive, got {scale}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return GeneratorBank(rng.normal(0.0, scale, size=(d, n, n)))


def vec(m: np.ndarray) -> np.ndarray:
    """Row-major flattening of a matrix (or stack of matrices)."""
    m = np.asarray(m)
    if m.ndim == 2:
        return m.reshape(-1)
    return m.reshape(m.shape[0], -1)


def mat(v: np.ndarray) -> np.ndarray:
    """Inverse of `vec`: reshape a length-n^2 vector into an n x n matrix."""
    v = np.asarray(v)
    n = int(round(np.sqrt(v.shape[-1])))
    if n * n != v.shape[-1]:
        raise DimensionError(f"vector length {v.shape[-1]} is not a square")
    if v.ndim == 1:
        return v.reshape(n, n)
    return v.reshape(v.shape[0], n, n)


def assemble_algebra(bank: GeneratorBank, t) -> np.ndarray:
    """Algebra element sum_j t_j A_j; batched when t has a leading axis."""
    t = as_float_array(t, "t")
    if t.shape[-1] != bank.d:
        raise DimensionError(f"t has {t.shape[-1]} coefficients for d={bank.d}")
    return np.tensordot(t, bank.generators, axes=1)


def group_element(bank: GeneratorBank, t) -> np.ndarray:
    """exp(A(t)) for one coefficient vector or a batch of them."""
    a = assemble_algebra(bank, t)
    if a.ndim == 2:
        return matcore.mat_exp(a)
    return matcore.mat_exp_batch(a)


def act(g, e) -> np.ndarray:
    """Left action vec(g @ mat(e)) on flat length-n^2 vectors."""
    g = np.asarray(g, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    em = mat(e)
    if g.shape[-1] != em.shape[-1]:
        raise DimensionError(
            f"group element of size {g.shape[-1]} cannot act on vectors of "
            f"length {e.shape[-1]}")
    return vec(g @ em)


# ---------------------------------------------------------------------------
# graph variants

def assemble_algebra_node(gens: gc.Node, t: gc.Node) -> gc.Node:
    """Graph version of `assemble_algebra`; returns (b, n, n) or (n, n)."""
    d, n = gens.value.shape[0], gens.value.shape[1]
    flat = gc.reshape_(gens, (d, n * n))
    if t.value.ndim == 1:
        row = gc.reshape_(t, (1, d))
        return gc.reshape_(gc.matmul(row, flat), (n, n))
    b = t.value.shape[0]
    return gc.reshape_(gc.matmul(t, flat), (b, n, n))


def mat_exp_node(a: gc.Node) -> gc.Node:
    """Graph matrix exponential, scaling and squaring unrolled.

    The scaling depth is fixed from the values present at trace time (the
    largest Frobenius norm in the batch), so re-running the same graph under
    perturbed bindings differentiates a fixed polynomial composition.
    """
    val = a.value
    batched = val.ndim == 3
    n = val.shape[-1]
    norms = np.sqrt(np.sum(val * val, axis=(-2, -1)))
    s = matcore.scaling_steps(float(np.max(norms)))
    x = gc.mul(a, 0.5 ** s) if s else a
    if batched:
        eye = gc.constant(np.broadcast_to(np.eye(n), val.shape).copy())
    else:
        eye = gc.constant(np.eye(n))
    t = eye
    for k in range(matcore.EXP_TAYLOR_ORDER, 0, -1):
        t = gc.add(eye, gc.mul(gc.matmul(x, t), 1.0 / k))
    for _ in range(s):
        t = gc.matmul(t, t)
    return t


def group_element_node(gens: gc.Node, t: gc.Node) -> gc.Node:
    return mat_exp_node(assemble_algebra_node(gens, t))


def act_node(g: gc.Node, e: gc.Node) -> gc.Node:
    """Graph version of `act`."""
    n = g.value.shape[-1]
    if g.value.ndim == 3:
        b = g.value.shape[0]
        em = gc.reshape_(e, (b, n, n))
        return gc.reshape_(gc.matmul(g, em), (b, n * n))
    em = gc.reshape_(e, (n, n))
    return gc.reshape_(gc.matmul(g, em), (n * n,))


def generator_slice(gens: gc.Node, j: int) -> gc.Node:
    """Graph slice picking generator j as an (n, n) node."""
    return gc.pick(gens, 0, j)
