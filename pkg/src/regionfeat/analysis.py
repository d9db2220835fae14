"""Quantitative analysis of learned weights and grayscale weight-map export."""

from __future__ import annotations

import re

import numpy as np

from .types import WeightField, as_mask

DEFAULT_EPSILON = 1e-8


def dense_weight_map(wf: WeightField, height: int, width: int) -> np.ndarray:
    """Scatter a weight field onto the full grid, ``(K, H, W)``, each part summing to one.

    Unsampled cells get zero weight.
    """
    dense = np.zeros((wf.num_parts, height * width))
    pos = wf.positions
    if len(pos) and (pos[:, 0].min() < 0 or pos[:, 0].max() >= width
                     or pos[:, 1].min() < 0 or pos[:, 1].max() >= height):
        raise ValueError("weight field positions fall outside the map")
    np.add.at(dense, (slice(None), pos[:, 1] * width + pos[:, 0]), wf.weights)
    sums = dense.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("every part needs positive total weight")
    return (dense / sums).reshape(-1, height, width)


def _smooth(q: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon == 0:
        return q
    q = q + epsilon
    return q / q.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, epsilon: float = DEFAULT_EPSILON) -> float:
    """``sum p ln(p / q)`` with ``0 ln 0 = 0``; ``q`` is epsilon-smoothed."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = _smooth(np.asarray(q, dtype=np.float64).ravel(), epsilon)
    nz = p > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


def mean_kl_between_parts(wm, epsilon: float = DEFAULT_EPSILON) -> float:
    """Average of ``KL(P_i || P_j)`` over all ordered part pairs ``i != j``."""
    wm = np.asarray(wm, dtype=np.float64)
    k = wm.shape[0]
    if k < 2:
        raise ValueError("mean KL between parts needs at least two parts")
    p = wm.reshape(k, -1)
    q = _smooth(p, epsilon)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
        logq = np.log(q)
    # cross[i, j] = sum_x p_i(x) ln q_j(x); -inf when q_j misses support of p_i
    cross = p @ np.where(q > 0, logq, 0.0).T
    missing = (p > 0).astype(np.float64) @ (q == 0).astype(np.float64).T
    cross[missing > 0] = -np.inf
    kl = plogp[:, None] - cross
    off_diag = ~np.eye(k, dtype=bool)
    return float(kl[off_diag].mean())


def max_pooled_map(wm) -> np.ndarray:
    pooled = np.asarray(wm, dtype=np.float64).max(axis=0)
    total = pooled.sum()
    if total <= 0:
        raise ValueError("weight map has no mass")
    return pooled / total


def kl_of_mask(wm, mask, epsilon: float = DEFAULT_EPSILON) -> float:
    """``KL(mask || max-pooled weights)``, both normalized to distributions."""
    wm = np.asarray(wm, dtype=np.float64)
    mask = as_mask(mask, wm.shape[1:])
    if mask.sum() == 0:
        raise ValueError("mask has no foreground cells")
    return kl_divergence(mask / mask.sum(), max_pooled_map(wm), epsilon)


def weight_map_image(wm, part="max") -> np.ndarray:
    """8-bit image of one part (int index) or the per-cell max over parts (``"max"``)."""
    wm = np.asarray(wm, dtype=np.float64)
    if wm.ndim == 2:
        wm = wm[None]
    img = wm.max(axis=0) if part == "max" else wm[int(part)]
    peak = img.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.floor(255.0 * img / peak + 0.5).astype(np.uint8)


def export_weight_map(wm, path, part="max") -> None:
    """Write a binary PGM (P5, maxval 255)."""
    img = weight_map_image(wm, part)
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(data[m.end(): m.end() + width * height], dtype=np.uint8)
    return pixels.reshape(height, width)
