"""Hand-crafted region feature extractors.

Every method here has two forms: a direct implementation and a
``*_weight_field`` builder that expresses the same operator as explicit
per-part weights over all map cells, so the generic weighted sum in
:func:`regionfeat.attention.aggregate` can reproduce it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorio import read_tensor, write_tensor
from .types import RoI, WeightField, as_feature_map, as_mask


@dataclass(frozen=True)
class BinGrid:
    """Regular ``rows x cols`` partition of an RoI.

    Bins are numbered row-major. ``bounds[k]`` is ``(x0, x1, y0, y1)``,
    ``centers[k]`` is ``(u, v)`` and ``cells[k]`` holds the integer cells
    whose centers lie in the half-open rectangle ``[x0, x1) x [y0, y1)``.
    """

    roi: RoI
    rows: int
    cols: int
    bounds: np.ndarray
    centers: np.ndarray
    cells: tuple

    @property
    def num_bins(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class OffsetPredictor:
    """Affine map from a flattened ``K*C_f`` regular-pooled feature to ``2K`` offsets.

    Offsets are read back as ``(K, 2)`` pairs ``(du_k, dv_k)``.
    """

    rows: int
    cols: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = self.rows * self.cols
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape[0] != 2 * k or w.shape[1] % k:
            raise ValueError(f"offset weight must be (2K, K*C_f) with K={k}, got {w.shape}")
        if b.shape != (2 * k,):
            raise ValueError(f"offset bias must have {2 * k} entries, got {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def channels(self) -> int:
        return self.weight.shape[1] // (self.rows * self.cols)

    @classmethod
    def zeros(cls, rows: int, cols: int, channels: int) -> "OffsetPredictor":
        k = rows * cols
        return cls(rows, cols, np.zeros((2 * k, k * channels)), np.zeros(2 * k))


def cells_in_span(lo: float, hi: float) -> np.ndarray:
    # integer i with i + 0.5 in [lo, hi)
    first = math.ceil(lo - 0.5)
    last = math.ceil(hi - 0.5) - 1
    return np.arange(first, last + 1, dtype=np.int64)


def make_bin_grid(b: RoI, rows: int, cols: int) -> BinGrid:
    if rows < 1 or cols < 1:
        raise ValueError("grid needs at least one row and one column")
    bw = b.width / cols
    bh = b.height / rows
    bounds, centers, cells = [], [], []
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        x0, x1 = b.x1 + c * bw, b.x1 + (c + 1) * bw
        y0, y1 = b.y1 + r * bh, b.y1 + (r + 1) * bh
        bounds.append((x0, x1, y0, y1))
        centers.append((0.5 * (x0 + x1), 0.5 * (y0 + y1)))
        us, vs = cells_in_span(x0, x1), cells_in_span(y0, y1)
        uu, vv = np.meshgrid(us, vs)
        cells.append(np.stack([uu.ravel(), vv.ravel()], axis=1))
    return BinGrid(b, rows, cols, np.array(bounds), np.array(centers), tuple(cells))


def nearest_cell(u: float, v: float, height: int, width: int) -> tuple[int, int]:
    """Cell whose center is closest to ``(u, v)``, clamped into the map."""
    return (min(max(math.floor(u), 0), width - 1), min(max(math.floor(v), 0), height - 1))


def bin_cells(grid: BinGrid, k: int, height: int, width: int) -> np.ndarray:
    """``R_bk`` restricted to the map, falling back to the cell nearest the bin center."""
    cells = grid.cells[k]
    keep = (cells[:, 0] >= 0) & (cells[:, 0] < width) & (cells[:, 1] >= 0) & (cells[:, 1] < height)
    cells = cells[keep]
    if len(cells) == 0:
        cells = np.array([nearest_cell(*grid.centers[k], height, width)], dtype=np.int64)
    return cells


def regular_pool(x, b: RoI, grid: BinGrid, mode: str = "avg") -> np.ndarray:
    x = as_feature_map(x)
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    height, width, _ = x.shape
    out = []
    for k in range(grid.num_bins):
        cells = bin_cells(grid, k, height, width)
        feats = x[cells[:, 1], cells[:, 0]]
        out.append(feats.mean(axis=0) if mode == "avg" else feats.max(axis=0))
    return np.stack(out)


def bilinear_weight(a, c):
    """1-D interpolation weight ``max(0, 1 - |a - c|)``."""
    return np.maximum(0.0, 1.0 - np.abs(np.subtract(a, c)))


def clamp_point(px, py, height: int, width: int):
    return np.clip(px, 0.5, width - 0.5), np.clip(py, 0.5, height - 0.5)


def bilinear_sample(x: np.ndarray, px, py) -> np.ndarray:
    """Interpolate ``x`` at continuous points; returns ``(n, C_f)``.

    Points are clamped to the centers of the border cells first.
    """
    height, width, _ = x.shape
    px, py = clamp_point(np.atleast_1d(np.asarray(px, dtype=np.float64)),
                         np.atleast_1d(np.asarray(py, dtype=np.float64)), height, width)
    fx, fy = px - 0.5, py - 0.5
    u0 = np.floor(fx).astype(np.int64)
    v0 = np.floor(fy).astype(np.int64)
    ax = (fx - u0)[:, None]
    ay = (fy - v0)[:, None]
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    top = (1.0 - ax) * x[v0, u0] + ax * x[v0, u1]
    bottom = (1.0 - ax) * x[v1, u0] + ax * x[v1, u1]
    return (1.0 - ay) * top + ay * bottom


def _sample_points(grid: BinGrid, samples_per_bin: int) -> tuple[np.ndarray, np.ndarray]:
    """Sampling points per bin, shape ``(K, S)`` for u and v."""
    if samples_per_bin == 1:
        return grid.centers[:, :1].copy(), grid.centers[:, 1:].copy()
    if samples_per_bin != 4:
        raise ValueError("samples_per_bin must be 1 or 4")
    x0, x1, y0, y1 = grid.bounds.T
    frac = np.array([0.25, 0.75])
    us = x0[:, None] + frac[None, :] * (x1 - x0)[:, None]
    vs = y0[:, None] + frac[None, :] * (y1 - y0)[:, None]
    pu = np.repeat(us, 2, axis=1)   # u0 u0 u1 u1
    pv = np.tile(vs, (1, 2))        # v0 v1 v0 v1
    return pu, pv


def aligned_pool(x, b: RoI, grid: BinGrid, samples_per_bin: int = 1) -> np.ndarray:
    x = as_feature_map(x)
    pu, pv = _sample_points(grid, samples_per_bin)
    k, s = pu.shape
    vals = bilinear_sample(x, pu.ravel(), pv.ravel()).reshape(k, s, -1)
    return vals.mean(axis=1) if s > 1 else vals[:, 0]


def deformable_pool(x, b: RoI, grid: BinGrid, offsets) -> np.ndarray:
    x = as_feature_map(x)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    if offsets.shape[0] != grid.num_bins:
        raise ValueError(f"expected {grid.num_bins} offsets, got {offsets.shape[0]}")
    if not np.all(np.isfinite(offsets)):
        raise ValueError("offsets must be finite")
    pu = grid.centers[:, 0] + offsets[:, 0]
    pv = grid.centers[:, 1] + offsets[:, 1]
    return bilinear_sample(x, pu, pv)


def predict_offsets(x, b: RoI, params: OffsetPredictor) -> np.ndarray:
    """Offsets ``(K, 2)`` regressed from an initial regular-pooled feature."""
    x = as_feature_map(x)
    if x.shape[2] != params.channels:
        raise ValueError(f"offset predictor expects {params.channels} channels, map has {x.shape[2]}")
    grid = make_bin_grid(b, params.rows, params.cols)
    initial = regular_pool(x, b, grid, "avg").ravel()
    return (params.weight @ initial + params.bias).reshape(-1, 2)


def ps_roi_pool(x, b: RoI, grid: BinGrid) -> np.ndarray:
    """Position-sensitive average pooling.

    Bin ``k`` averages only channels ``[k*C/K, (k+1)*C/K)``. The result is
    ``(K, C_f)``: the first ``C_f/K`` columns hold the pooled values and the
    remaining columns are zero padding.
    """
    x = as_feature_map(x)
    height, width, channels = x.shape
    k_total = grid.num_bins
    if channels % k_total:
        raise ValueError(f"channel count {channels} is not divisible by K={k_total}")
    group = channels // k_total
    out = np.zeros((k_total, channels))
    for k in range(k_total):
        cells = bin_cells(grid, k, height, width)
        out[k, :group] = x[cells[:, 1], cells[:, 0], k * group:(k + 1) * group].mean(axis=0)
    return out


def center_feature(x, b: RoI) -> np.ndarray:
    x = as_feature_map(x)
    cu, cv = b.center
    return bilinear_sample(x, cu, cv)


def bin_inside_mask(grid: BinGrid, mask: np.ndarray) -> np.ndarray:
    height, width = mask.shape
    inside = np.zeros(grid.num_bins, dtype=bool)
    for k, (cu, cv) in enumerate(grid.centers):
        u, v = nearest_cell(cu, cv, height, width)
        inside[k] = mask[v, u] == 1.0
    return inside


def masked_pool(x, b: RoI, grid: BinGrid, mask) -> np.ndarray:
    x = as_feature_map(x)
    mask = as_mask(mask, x.shape[:2])
    out = regular_pool(x, b, grid, "avg")
    out[~bin_inside_mask(grid, mask)] = 0.0
    return out


# -- weight-field forms ------------------------------------------------------


def all_cells(height: int, width: int) -> np.ndarray:
    vv, uu = np.mgrid[0:height, 0:width]
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def regular_weight_field(shape, grid: BinGrid) -> WeightField:
    height, width = shape[:2]
    w = np.zeros((grid.num_bins, height * width))
    for k in range(grid.num_bins):
        cells = bin_cells(grid, k, height, width)
        w[k, cells[:, 1] * width + cells[:, 0]] = 1.0 / len(cells)
    return WeightField(all_cells(height, width), w)


def _point_weights(height: int, width: int, pu, pv) -> np.ndarray:
    # g(u_p, u_k) * g(v_p, v_k) evaluated for every cell center
    pu, pv = clamp_point(np.asarray(pu, dtype=np.float64), np.asarray(pv, dtype=np.float64), height, width)
    cu = np.arange(width) + 0.5
    cv = np.arange(height) + 0.5
    gu = bilinear_weight(cu[None, :], pu[:, None])
    gv = bilinear_weight(cv[None, :], pv[:, None])
    return (gv[:, :, None] * gu[:, None, :]).reshape(len(pu), -1)


def aligned_weight_field(shape, grid: BinGrid, samples_per_bin: int = 1, offsets=None) -> WeightField:
    height, width = shape[:2]
    pu, pv = _sample_points(grid, samples_per_bin)
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
        pu = pu + offsets[:, :1]
        pv = pv + offsets[:, 1:]
    k, s = pu.shape
    w = _point_weights(height, width, pu.ravel(), pv.ravel()).reshape(k, s, -1).mean(axis=1)
    return WeightField(all_cells(height, width), w)


def ps_weight_field(shape, grid: BinGrid) -> WeightField:
    """Spatial weights of position-sensitive pooling; pair with :func:`select_part_channels`."""
    return regular_weight_field(shape, grid)


def select_part_channels(y: np.ndarray) -> np.ndarray:
    """Keep channel group ``k`` of row ``k`` and zero the rest, shifted to the front."""
    y = np.asarray(y, dtype=np.float64)
    k_total, channels = y.shape
    if channels % k_total:
        raise ValueError(f"channel count {channels} is not divisible by K={k_total}")
    group = channels // k_total
    out = np.zeros_like(y)
    for k in range(k_total):
        out[k, :group] = y[k, k * group:(k + 1) * group]
    return out


def center_weight_field(shape, b: RoI) -> WeightField:
    height, width = shape[:2]
    cu, cv = b.center
    return WeightField(all_cells(height, width), _point_weights(height, width, [cu], [cv]))


def masked_weight_field(shape, grid: BinGrid, mask) -> WeightField:
    mask = as_mask(mask, shape[:2])
    base = regular_weight_field(shape, grid)
    w = base.weights.copy()
    w[~bin_inside_mask(grid, mask)] = 0.0
    return WeightField(base.positions, w, normalized=False)


def save_offset_predictor(path, params: OffsetPredictor) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "offset_weight.rft", params.weight)
    write_tensor(path / "offset_bias.rft", params.bias)
    with open(path / "manifest.json", "w") as fh:
        json.dump({"rows": params.rows, "cols": params.cols, "C_f": params.channels}, fh, sort_keys=True)


def load_offset_predictor(path) -> OffsetPredictor:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    params = OffsetPredictor(
        manifest["rows"], manifest["cols"],
        read_tensor(path / "offset_weight.rft").astype(np.float64),
        read_tensor(path / "offset_bias.rft").astype(np.float64),
    )
    if params.channels != manifest["C_f"]:
        raise ValueError(f"{path}: manifest C_f={manifest['C_f']} but weights imply {params.channels}")
    return params
