"""Dense float64 matrix numerics underpinning the group machinery.

Matrices are plain 2-d C-contiguous float64 ndarrays (row-major), batches
of matrices are 3-d arrays with the batch axis first.
"""

from __future__ import annotations

import numpy as np

from .validation import as_float_array, as_square_matrix, as_vector, check_same_shape

# Series truncation and scaling threshold for the exponential. The same
# constants drive the graph-unrolled version in gradcore, so the two
# implementations perform the identical arithmetic sequence.
EXP_TAYLOR_ORDER = 12
EXP_NORM_THRESHOLD = 0.5


def frobenius_norm(m) -> float:
    """Frobenius norm of a matrix or of each entry pattern in any array."""
    arr = as_float_array(m, "matrix")
    return float(np.sqrt(np.sum(arr * arr)))


def commutator(a, b) -> np.ndarray:
    """Matrix commutator ab - ba for square matrices of equal size."""
    a = as_square_matrix(a, "a")
    b = as_square_matrix(b, "b")
    check_same_shape(a, b)
    return a @ b - b @ a


def scaling_steps(norm: float) -> int:
    """Number of halvings needed to bring a norm at or below the threshold."""
    if norm <= EXP_NORM_THRESHOLD:
        return 0
    return int(np.ceil(np.log2(norm / EXP_NORM_THRESHOLD)))


def _exp_taylor(x: np.ndarray, eye: np.ndarray) -> np.ndarray:
    # Horner evaluation of sum_{k<=12} x^k / k!; only adds and matmuls so
    # the gradient engine can replay the identical composition.
    t = eye
    for k in range(EXP_TAYLOR_ORDER, 0, -1):
        t = eye + (x @ t) * (1.0 / k)
    return t


def mat_exp(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring around a fixed Taylor core.

    The input is halved until its Frobenius norm is at most 0.5, the order-12
    Taylor polynomial is applied, and the result is squared back up.
    """
    a = as_square_matrix(a, "a")
    s = scaling_steps(frobenius_norm(a))
    x = a * (0.5 ** s)
    e = _exp_taylor(x, np.eye(a.shape[0]))
    for _ in range(s):
        e = e @ e
    return e


def mat_exp_batch(a) -> np.ndarray:
    """Exponential of a stack of square matrices, shape (b, n, n).

    One scaling count is chosen from the largest norm in the stack so the
    whole batch runs through a single vectorized Horner recursion.
    """
    arr = as_float_array(a, "a")
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected a (b, n, n) stack, got shape {arr.shape}")
    norms = np.sqrt(np.sum(arr * arr, axis=(1, 2)))
    s = scaling_steps(float(norms.max())) if arr.shape[0] else 0
    x = arr * (0.5 ** s)
    eye = np.broadcast_to(np.eye(arr.shape[1]), arr.shape)
    e = _exp_taylor(x, eye)
    for _ in range(s):
        e = e @ e
    return e


def two_column_sigma_max(c1, c2) -> float:
    """Largest singular value of the matrix whose columns are c1 and c2.

    Uses the closed form for the 2x2 Gram matrix: its top eigenvalue is
    (tr + sqrt((g11-g22)^2 + 4 g12^2)) / 2 and the singular value is its
    square root.
    """
    c1 = as_vector(c1, "c1")
    c2 = as_vector(c2, "c2")
    check_same_shape(c1, c2, "columns")
    g11 = float(c1 @ c1)
    g22 = float(c2 @ c2)
    g12 = float(c1 @ c2)
    disc = np.sqrt(max((g11 - g22) ** 2 + 4.0 * g12 * g12, 0.0))
    lam = 0.5 * ((g11 + g22) + disc)
    return float(np.sqrt(max(lam, 0.0)))


def percentile(values, p: float) -> float:
    """Percentile with linear interpolation between closest ranks.

    The sorted sample is indexed at (p / 100) * (n - 1) and neighbouring
    entries are blended by the fractional part.
    """
    arr = as_vector(values, "values")
    if arr.size == 0:
        raise ValueError("percentile of an empty sample is undefined")
    p = float(p)
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile rank must lie in [0, 100], got {p}")
    srt = np.sort(arr)
    idx = (p / 100.0) * (srt.size - 1)
    lo = int(np.floor(idx))
    hi = int(np.ceil(idx))
    frac = idx - lo
    return float(srt[lo] + (srt[hi] - srt[lo]) * frac)
