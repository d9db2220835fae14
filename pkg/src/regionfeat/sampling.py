"""Support regions and their strided sample sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pooling import cells_in_span, nearest_cell
from .types import RoI

KINDS = ("roi_1x", "roi_2x", "whole_image")


@dataclass(frozen=True)
class SupportSpec:
    kind: str = "whole_image"
    max_in: int = 196
    max_out: int = 196

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown support kind {self.kind!r}; expected one of {KINDS}")
        if self.max_in < 1:
            raise ValueError("max_in must be positive")
        if self.max_out < 0 or (self.max_out == 0 and self.kind != "roi_1x"):
            raise ValueError("max_out must be positive unless the support is the RoI itself")


@dataclass(frozen=True)
class SamplingPlan:
    """Sampled cells inside and outside the RoI, as ``(n, 2)`` ``(u, v)`` arrays."""

    in_positions: np.ndarray
    out_positions: np.ndarray
    strides: tuple[int, int, int]

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate([self.in_positions, self.out_positions])

    @property
    def size(self) -> int:
        return len(self.in_positions) + len(self.out_positions)

    def same_as(self, other: "SamplingPlan") -> bool:
        return (np.array_equal(self.in_positions, other.in_positions)
                and np.array_equal(self.out_positions, other.out_positions))


def inside_strides(b: RoI, max_in: int = 196) -> tuple[int, int]:
    if max_in < 1:
        raise ValueError("max_in must be positive")
    root = math.sqrt(max_in)
    return max(1, math.ceil(b.width / root)), max(1, math.ceil(b.height / root))


def outside_stride(height: int, width: int, max_out: int = 196) -> int:
    if max_out < 1:
        raise ValueError("max_out must be positive")
    return max(1, math.ceil(math.sqrt(height * width / max_out)))


def _clip(cells: np.ndarray, n: int) -> np.ndarray:
    return cells[(cells >= 0) & (cells < n)]


def _grid(us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.int64)


def _support_box(b: RoI, kind: str, height: int, width: int) -> tuple[float, float, float, float]:
    if kind == "whole_image":
        return (0.0, 0.0, float(width), float(height))
    half = math.sqrt(2.0) / 2.0
    cx, cy = b.center
    return (cx - half * b.width, cy - half * b.height, cx + half * b.width, cy + half * b.height)


def _make_plan(b: RoI, height: int, width: int, kind: str,
               sx: int, sy: int, s_out: int) -> SamplingPlan:
    if b.x2 < 0 or b.y2 < 0 or b.x1 > width or b.y1 > height:
        raise ValueError(f"RoI {b.as_tuple()} lies outside the {height}x{width} map")
    us = _clip(cells_in_span(b.x1, b.x2), width)
    vs = _clip(cells_in_span(b.y1, b.y2), height)
    if len(us) and len(vs):
        inside = _grid(us[::sx], vs[::sy])
        roi_cells = set(map(tuple, _grid(us, vs)))
    else:
        # no cell center falls in the box: keep the cell nearest its center
        inside = np.array([nearest_cell(*b.center, height, width)], dtype=np.int64)
        roi_cells = {tuple(inside[0])}

    outside = np.zeros((0, 2), dtype=np.int64)
    if kind != "roi_1x":
        bx1, by1, bx2, by2 = _support_box(b, kind, height, width)
        ou = _clip(cells_in_span(bx1, bx2), width)
        ov = _clip(cells_in_span(by1, by2), height)
        cand = _grid(ou[ou % s_out == 0], ov[ov % s_out == 0])
        if len(cand):
            keep = np.array([tuple(c) not in roi_cells for c in cand])
            outside = cand[keep]
    return SamplingPlan(inside, outside.reshape(-1, 2), (sx, sy, s_out))


def build_plan(b: RoI, height: int, width: int, spec: SupportSpec = SupportSpec()) -> SamplingPlan:
    """Sparse plan: strided RoI cells plus strided context cells.

    The inside lattice starts at the top-left RoI cell within the map, the
    outside lattice at cell ``(0, 0)``. A region whose cell count already
    fits its budget is sampled in full. Otherwise the strides follow
    :func:`inside_strides` and :func:`outside_stride`, with the inside strides
    raised just enough to stay within ``max_in`` when it is not a perfect
    square.
    """
    nu = len(_clip(cells_in_span(b.x1, b.x2), width))
    nv = len(_clip(cells_in_span(b.y1, b.y2), height))
    if nu * nv <= spec.max_in:
        sx = sy = 1
    else:
        sx, sy = inside_strides(b, spec.max_in)
        side = math.isqrt(spec.max_in)
        sx = max(sx, -(-nu // side))
        sy = max(sy, -(-nv // side))
    s_out = 0
    if spec.kind != "roi_1x":
        full = _make_plan(b, height, width, spec.kind, sx, sy, 1)
        if len(full.out_positions) <= spec.max_out:
            return full
        s_out = outside_stride(height, width, spec.max_out)
    return _make_plan(b, height, width, spec.kind, sx, sy, s_out)


def dense_plan(b: RoI, height: int, width: int, spec: SupportSpec = SupportSpec()) -> SamplingPlan:
    """Every cell of the support region, split into RoI and context cells."""
    return _make_plan(b, height, width, spec.kind, 1, 1, 1)


def random_rois(rng: np.random.Generator, height: int, width: int, n: int,
                min_side: float = 2.0, max_frac: float = 1.0) -> list[RoI]:
    """Boxes with log-uniform side lengths, fully inside the map.

    A rough stand-in for detector proposals: many small boxes, few large.
    """
    hi = np.log(max(min_side, max_frac * min(height, width)))
    rois = []
    for _ in range(n):
        w, h = np.exp(rng.uniform(np.log(min_side), hi, size=2))
        x1 = rng.uniform(0.0, width - w)
        y1 = rng.uniform(0.0, height - h)
        rois.append(RoI(float(x1), float(y1), float(x1 + w), float(y1 + h)))
    return rois
