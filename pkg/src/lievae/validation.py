"""Input validation helpers used at public entry points."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Coerce to a C-contiguous float64 ndarray, rejecting non-finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def as_square_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = as_matrix(x, name)
    if arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    return arr


def as_vector(x, name: str = "vector") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-d, got shape {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} have mismatched shapes {a.shape} and {b.shape}")


def check_image_batch(x, side: int, name: str = "images") -> np.ndarray:
    """Validate a batch of flattened images with pixel values in [0, 1]."""
    arr = as_matrix(x, name)
    if arr.shape[1] != side * side:
        raise DimensionError(
            f"{name} must have {side * side} columns for side {side}, "
            f"got {arr.shape[1]}"
        )
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must have pixel values in [0, 1]")
    return arr


def check_index(i: int, n: int, name: str = "index") -> int:
    i = int(i)
    if not 0 <= i < n:
        raise ValueError(f"{name} {i} out of range [0, {n})")
    return i
