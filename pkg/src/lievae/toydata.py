"""Procedural shape dataset with five ground-truth factors.

Each image shows one anti-aliased shape on a black background. The factors
are shape category, center x, center y, scale, and rotation. Position and
size ranges are chosen so the shape stays fully inside the frame for every
admissible factor combination: the circumradius never exceeds the margin
left by the position range.

Serialized layout (little-endian): a 16-byte header of magic b"LVTD",
uint32 version, uint32 count, uint32 side; then count*side*side row-major
uint8 pixels; then a count x 5 float64 label table in factor order
(shape, x, y, scale, rotation). Pixels decode to [0, 1] as value / 255.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .seeding import stream_rng

MAGIC = b"LVTD"
VERSION = 1

SHAPE_NAMES = ("square", "ellipse-disc", "triangle")
POSITION_RANGE = (0.15, 0.85)
SCALE_RANGE = (0.3, 0.7)
MIN_SIDE = 12

# Scale maps to circumradius so that the largest shape at the most extreme
# admissible position still fits: 0.7 * RADIUS_PER_SCALE <= 0.15.
RADIUS_PER_SCALE = POSITION_RANGE[0] / SCALE_RANGE[1]
ELLIPSE_MINOR = 0.6
SUPERSAMPLE = 4

FACTOR_NAMES = ("shape", "x", "y", "scale", "rotation")
NUM_FACTORS = len(FACTOR_NAMES)


@dataclass(frozen=True)
class FactorSpec:
    """Ground-truth factors for one image."""

    shape: int
    x: float
    y: float
    scale: float
    rotation: float

    def validate(self) -> "FactorSpec":
        if self.shape not in range(len(SHAPE_NAMES)):
            raise ValueError(f"shape category must be 0..2, got {self.shape}")
        for name, value, (lo, hi) in (("x", self.x, POSITION_RANGE),
                                      ("y", self.y, POSITION_RANGE),
                                      ("scale", self.scale, SCALE_RANGE)):
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        if not 0.0 <= self.rotation < 2.0 * np.pi:
            raise ValueError(f"rotation={self.rotation} outside [0, 2pi)")
        return self

    def as_row(self) -> np.ndarray:
        return np.array([float(self.shape), self.x, self.y, self.scale,
                         self.rotation])


def _check_side(side: int) -> int:
    side = int(side)
    if side < MIN_SIDE:
        raise ValueError(f"image side must be at least {MIN_SIDE}, got {side}")
    return side


# Unit-circumradius equilateral triangle, one vertex straight up.
_TRI = np.array([[0.0, 1.0],
                 [-np.sqrt(3.0) / 2.0, -0.5],
                 [np.sqrt(3.0) / 2.0, -0.5]])


def render_batch(labels, side: int) -> np.ndarray:
    """Render a (b, 5) label table into float images of shape (b, side, side)."""
    side = _check_side(side)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[1] != 5:
        raise DimensionError(f"labels must be (b, 5), got {labels.shape}")
    b = labels.shape[0]
    shape = labels[:, 0].astype(int)
    cx, cy, scale, rot = labels[:, 1], labels[:, 2], labels[:, 3], labels[:, 4]
    radius = scale * RADIUS_PER_SCALE

    ss = SUPERSAMPLE
    grid = (np.arange(side)[:, None] + (np.arange(ss) + 0.5)[None, :] / ss) / side
    # Subpixel coordinates: px[c, i] pairs with py[r, j].
    px = grid.reshape(-1)
    py = grid.reshape(-1)
    dx = px[None, None, :] - cx[:, None, None]
    dy = py[None, :, None] - cy[:, None, None]

    cos_r = np.cos(rot)[:, None, None]
    sin_r = np.sin(rot)[:, None, None]
    r = radius[:, None, None]
    u = (cos_r * dx + sin_r * dy) / r
    v = (-sin_r * dx + cos_r * dy) / r

    inside = np.zeros(u.shape, dtype=bool)

    sq = shape == 0
    if sq.any():
        half = 1.0 / np.sqrt(2.0)
        inside[sq] = np.maximum(np.abs(u[sq]), np.abs(v[sq])) <= half

    el = shape == 1
    if el.any():
        inside[el] = u[el] ** 2 + (v[el] / ELLIPSE_MINOR) ** 2 <= 1.0

    tr = shape == 2
    if tr.any():
        ut, vt = u[tr], v[tr]
        ok = np.ones(ut.shape, dtype=bool)
        for k in range(3):
            a, bv = _TRI[k], _TRI[(k + 1) % 3]
            edge = bv - a
            cross = edge[0] * (vt - a[1]) - edge[1] * (ut - a[0])
            ref = edge[0] * (0.0 - a[1]) - edge[1] * (0.0 - a[0])
            ok &= cross * ref >= 0.0
        inside[tr] = ok

    cover = inside.reshape(b, side, ss, side, ss).mean(axis=(2, 4))
    return cover


def render_sample(spec: FactorSpec, side: int) -> np.ndarray:
    """Render one FactorSpec into a float image with values in [0, 1]."""
    spec.validate()
    return render_batch(spec.as_row()[None, :], side)[0]


def sample_factors(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform draws of all five factors, returned as a (count, 5) table."""
    out = np.empty((count, 5))
    out[:, 0] = rng.integers(0, len(SHAPE_NAMES), size=count)
    out[:, 1] = rng.uniform(*POSITION_RANGE, size=count)
    out[:, 2] = rng.uniform(*POSITION_RANGE, size=count)
    out[:, 3] = rng.uniform(*SCALE_RANGE, size=count)
    out[:, 4] = rng.uniform(0.0, 2.0 * np.pi, size=count)
    return out


@dataclass
class Dataset:
    """Quantized images plus their ground-truth factor table."""

    images: np.ndarray  # uint8, (count, side, side)
    labels: np.ndarray  # float64, (count, 5)

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise DimensionError(
                f"images must be (count, side, side), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0], 5):
            raise DimensionError(
                f"labels must be ({self.images.shape[0]}, 5), got {self.labels.shape}")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[1]

    def pixels01(self) -> np.ndarray:
        """Flattened float images in [0, 1], shape (count, side*side)."""
        return self.images.reshape(self.count, -1).astype(np.float64) / 255.0


def generate_dataset(count: int, side: int, seed: int) -> Dataset:
    """Sample factors from their ranges and render the quantized images."""
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    side = _check_side(side)
    rng = stream_rng(seed, "dataset")
    labels = sample_factors(rng, count)
    cover = render_batch(labels, side)
    images = np.round(cover * 255.0).astype(np.uint8)
    return Dataset(images=images, labels=labels)


def save_dataset(dataset: Dataset, path: str) -> str:
    """Write the binary dataset file atomically; returns its sha256 digest."""
    header = MAGIC + struct.pack("<III", VERSION, dataset.count, dataset.side)
    body = header + dataset.images.tobytes() + \
        dataset.labels.astype("<f8").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)
    return hashlib.sha256(body).hexdigest()


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError(f"{path} is not a shape dataset file")
    version, count, side = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    n_pix = count * side * side
    expected = 16 + n_pix + count * 5 * 8
    if len(blob) != expected:
        raise ValueError(
            f"{path} is truncated: {len(blob)} bytes, expected {expected}")
    images = np.frombuffer(blob, dtype=np.uint8, count=n_pix, offset=16)
    labels = np.frombuffer(blob, dtype="<f8", count=count * 5,
                           offset=16 + n_pix)
    return Dataset(images=images.reshape(count, side, side).copy(),
                   labels=labels.reshape(count, 5).astype(np.float64))
