"""Domain types shared across the package.

Feature maps are plain ``float64`` arrays of shape ``(H, W, C_f)`` laid out
as (y, x, channel). Part features are ``(K, C_f)`` arrays. Masks are
``(H, W)`` arrays of 0/1. Cell ``(u, v)`` (column ``u``, row ``v``) sits at
continuous coordinate ``(u + 0.5, v + 0.5)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RoI:
    """Axis-aligned box in feature-map units."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"RoI.{name} must be finite")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"RoI corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scaled(self, factor: float) -> "RoI":
        """Return the box with every coordinate multiplied by ``factor``."""
        return RoI(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)


@dataclass(frozen=True)
class Position:
    u: float
    v: float


@dataclass(frozen=True)
class WeightField:
    """Per-part weights over an ordered list of integer cells.

    Attributes:
        positions: ``(n, 2)`` int array of ``(u, v)`` cells.
        weights: ``(K, n)`` non-negative array.
        normalized: when true every row must sum to one.
    """

    positions: np.ndarray
    weights: np.ndarray
    normalized: bool = field(default=True)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != pos.shape[0]:
            raise ValueError(
                f"weights shape {w.shape} does not match {pos.shape[0]} positions"
            )
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if self.normalized and w.shape[1] > 0:
            sums = w.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ValueError(f"weight rows do not sum to 1: {sums}")
        pos.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def num_parts(self) -> int:
        return self.weights.shape[0]


def as_feature_map(x) -> np.ndarray:
    """Validate and convert to a ``float64`` ``(H, W, C_f)`` array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"feature map must have shape (H, W, C_f), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    return arr


def as_mask(mask, shape: tuple[int, int] | None = None) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match feature map {tuple(shape)}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask values must be 0 or 1")
    return m


def check_part_features(y: np.ndarray, num_parts: int, channels: int) -> np.ndarray:
    if y.shape != (num_parts, channels):
        raise AssertionError(f"expected part features {(num_parts, channels)}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite region feature")
    return y


def cell_centers(positions: np.ndarray) -> np.ndarray:
    """Continuous ``(u, v)`` coordinates of integer cells."""
    return np.asarray(positions, dtype=np.float64) + 0.5
