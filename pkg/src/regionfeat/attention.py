"""Learnable region feature extraction.

Each part ``k`` pools the map with softmax weights over the sampled
positions, where the logit of position ``p`` is a geometric term (inner
product of transformed sinusoidal box and position embeddings) plus an
appearance term (a 1x1 convolution of ``x(p)``).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .sampling import SamplingPlan, SupportSpec, build_plan, dense_plan
from .tensorio import read_tensor, write_tensor
from .types import RoI, WeightField, as_feature_map, cell_centers

TENSOR_FILES = {
    "v_box": "v_box.rft",
    "w_box_hat": "w_box_hat.rft",
    "w_im": "w_im.rft",
    "w_app": "w_app.rft",
}


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 512
    transform_dim: int = 256
    base: float = 1000.0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ValueError(f"embedding dim must be a positive even integer, got {self.dim}")
        if self.transform_dim < 1:
            raise ValueError("transform dim must be positive")


@dataclass(frozen=True)
class AttentionParams:
    """Learnable tensors.

    Shapes: ``v_box`` (C_E, 4C_E), ``w_box_hat`` (K, C_g, C_E),
    ``w_im`` (C_g, 2C_E), ``w_app`` (K, C_f).
    """

    v_box: np.ndarray
    w_box_hat: np.ndarray
    w_im: np.ndarray
    w_app: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{f.name} contains non-finite values")
            object.__setattr__(self, f.name, arr)
        ce = self.v_box.shape[0]
        k, cg = self.w_app.shape[0], self.w_im.shape[0]
        expected = {
            "v_box": (ce, 4 * ce),
            "w_box_hat": (k, cg, ce),
            "w_im": (cg, 2 * ce),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.w_app.ndim != 2:
            raise ValueError("w_app must be (K, C_f)")

    @property
    def num_parts(self) -> int:
        return self.w_app.shape[0]

    @property
    def channels(self) -> int:
        return self.w_app.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.v_box.shape[0]

    @property
    def transform_dim(self) -> int:
        return self.w_im.shape[0]

    @classmethod
    def zeros(cls, num_parts: int, embed_dim: int, transform_dim: int, channels: int) -> "AttentionParams":
        return cls(
            v_box=np.zeros((embed_dim, 4 * embed_dim)),
            w_box_hat=np.zeros((num_parts, transform_dim, embed_dim)),
            w_im=np.zeros((transform_dim, 2 * embed_dim)),
            w_app=np.zeros((num_parts, channels)),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def updated(self, **tensors) -> "AttentionParams":
        return replace(self, **tensors)


def check_config(params: AttentionParams, cfg: EmbeddingConfig) -> None:
    if params.embed_dim != cfg.dim or params.transform_dim != cfg.transform_dim:
        raise ValueError(
            f"params have C_E={params.embed_dim}, C_g={params.transform_dim}; "
            f"config expects C_E={cfg.dim}, C_g={cfg.transform_dim}"
        )


def save_checkpoint(path, params: AttentionParams) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, fname in TENSOR_FILES.items():
        write_tensor(path / fname, getattr(params, name))
    manifest = {
        "K": params.num_parts,
        "C_E": params.embed_dim,
        "C_g": params.transform_dim,
        "C_f": params.channels,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[AttentionParams, EmbeddingConfig]:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    tensors = {name: read_tensor(path / fname).astype(np.float64) for name, fname in TENSOR_FILES.items()}
    params = AttentionParams(**tensors)
    dims = (params.num_parts, params.embed_dim, params.transform_dim, params.channels)
    if dims != (manifest["K"], manifest["C_E"], manifest["C_g"], manifest["C_f"]):
        raise ValueError(f"{path}: manifest {manifest} disagrees with tensor shapes {dims}")
    return params, EmbeddingConfig(dim=manifest["C_E"], transform_dim=manifest["C_g"])


# -- embeddings --------------------------------------------------------------


def embed_scalar(z, dim: int, base: float = 1000.0) -> np.ndarray:
    """Interleaved ``sin(z / base**(2i/dim))``, ``cos(...)``; output shape ``z.shape + (dim,)``."""
    if dim < 2 or dim % 2:
        raise ValueError("embedding dim must be a positive even integer")
    z = np.asarray(z, dtype=np.float64)
    wavelength = base ** (2.0 * np.arange(dim // 2) / dim)
    phase = z[..., None] / wavelength
    out = np.empty(z.shape + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def embed_position(p, cfg: EmbeddingConfig) -> np.ndarray:
    """Embed continuous ``(u, v)`` coordinates into ``2*C_E`` values.

    Accepts a :class:`Position`, a pair, or an ``(n, 2)`` array.
    """
    if hasattr(p, "u"):
        p = (p.u, p.v)
    p = np.asarray(p, dtype=np.float64)
    e = embed_scalar(p, cfg.dim, cfg.base)
    return e.reshape(p.shape[:-1] + (2 * cfg.dim,))


def embed_box(b: RoI, cfg: EmbeddingConfig) -> np.ndarray:
    return embed_scalar(np.array(b.as_tuple()), cfg.dim, cfg.base).ravel()


@lru_cache(maxsize=32)
def _map_embeddings(height: int, width: int, dim: int, base: float) -> np.ndarray:
    cells = np.stack(np.meshgrid(np.arange(width), np.arange(height)), axis=-1).reshape(-1, 2)
    emb = embed_position(cell_centers(cells), EmbeddingConfig(dim=dim, transform_dim=1, base=base))
    emb.setflags(write=False)
    return emb


def map_embeddings(height: int, width: int, cfg: EmbeddingConfig) -> np.ndarray:
    """Position embeddings of every cell center, ``(H*W, 2*C_E)`` row-major."""
    return _map_embeddings(height, width, cfg.dim, cfg.base)


# -- logits and weights ------------------------------------------------------


def box_queries(b: RoI, params: AttentionParams, cfg: EmbeddingConfig) -> np.ndarray:
    """``W_box_hat[k] @ (V_box @ E_box(b))`` for every part, ``(K, C_g)``."""
    reduced = params.v_box @ embed_box(b, cfg)
    return params.w_box_hat @ reduced


def geometric_logits(b: RoI, plan: SamplingPlan, params: AttentionParams, cfg: EmbeddingConfig) -> np.ndarray:
    check_config(params, cfg)
    keys = embed_position(cell_centers(plan.positions), cfg) @ params.w_im.T
    return box_queries(b, params, cfg) @ keys.T


def appearance_logits(x, plan: SamplingPlan, params: AttentionParams) -> np.ndarray:
    x = as_feature_map(x)
    if x.shape[2] != params.channels:
        raise ValueError(f"w_app expects {params.channels} channels, map has {x.shape[2]}")
    pos = plan.positions
    return params.w_app @ x[pos[:, 1], pos[:, 0]].T


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def combine_weights(geometric: np.ndarray, appearance: np.ndarray, positions) -> WeightField:
    if geometric.shape != appearance.shape:
        raise ValueError(f"logit shapes differ: {geometric.shape} vs {appearance.shape}")
    return WeightField(positions, softmax_rows(geometric + appearance))


def aggregate(x, wf: WeightField) -> np.ndarray:
    """Weighted sum of features over the field's positions, ``(K, C_f)``."""
    x = as_feature_map(x)
    pos = wf.positions
    return wf.weights @ x[pos[:, 1], pos[:, 0]]


# -- extraction --------------------------------------------------------------


@dataclass
class ForwardCache:
    """Intermediates of one RoI's forward pass, reused by the backward pass."""

    roi: RoI
    positions: np.ndarray
    flat_index: np.ndarray
    box_embedding: np.ndarray
    reduced_box: np.ndarray
    queries: np.ndarray
    keys: np.ndarray
    features: np.ndarray
    weights: np.ndarray
    output: np.ndarray


class SharedMaps:
    """Per-image products reused across RoIs: position keys and appearance logits."""

    def __init__(self, x, params: AttentionParams, cfg: EmbeddingConfig):
        check_config(params, cfg)
        self.x = as_feature_map(x)
        height, width, channels = self.x.shape
        if channels != params.channels:
            raise ValueError(f"w_app expects {params.channels} channels, map has {channels}")
        self.params, self.cfg = params, cfg
        self.height, self.width = height, width
        self.flat_x = self.x.reshape(height * width, channels)
        self.embeddings = map_embeddings(height, width, cfg)
        self.keys = self.embeddings @ params.w_im.T
        self.appearance = self.flat_x @ params.w_app.T

    def forward(self, b: RoI, plan: SamplingPlan) -> ForwardCache:
        positions = plan.positions
        idx = positions[:, 1] * self.width + positions[:, 0]
        e_box = embed_box(b, self.cfg)
        reduced = self.params.v_box @ e_box
        queries = self.params.w_box_hat @ reduced
        keys = self.keys[idx]
        feats = self.flat_x[idx]
        logits = queries @ keys.T + self.appearance[idx].T
        weights = softmax_rows(logits)
        out = weights @ feats
        return ForwardCache(b, positions, idx, e_box, reduced, queries, keys, feats, weights, out)


def plan_for(b: RoI, height: int, width: int, spec: SupportSpec, dense: bool = False) -> SamplingPlan:
    return (dense_plan if dense else build_plan)(b, height, width, spec)


def extract(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
            spec: SupportSpec = SupportSpec(), dense: bool = False) -> np.ndarray:
    """Region feature ``(K, C_f)`` of one RoI."""
    return extract_rois(x, [b], params, cfg, spec, dense=dense)[0]


def worker_count() -> int:
    raw = os.environ.get("REGIONFEAT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"REGIONFEAT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("REGIONFEAT_THREADS must be non-negative")
    return n or (os.cpu_count() or 1)


def extract_rois(x, rois, params: AttentionParams, cfg: EmbeddingConfig,
                 spec: SupportSpec = SupportSpec(), dense: bool = False,
                 workers: int = 1) -> np.ndarray:
    """Region features ``(N, K, C_f)``; output order follows ``rois``."""
    shared = SharedMaps(x, params, cfg)

    def one(b):
        return shared.forward(b, plan_for(b, shared.height, shared.width, spec, dense)).output

    if workers > 1 and len(rois) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(one, rois))
    else:
        outs = [one(b) for b in rois]
    if not outs:
        return np.zeros((0, params.num_parts, params.channels))
    return np.stack(outs)


def weight_field(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
                 spec: SupportSpec = SupportSpec(), dense: bool = False) -> WeightField:
    """The learned weights of one RoI over its sampled positions."""
    shared = SharedMaps(x, params, cfg)
    cache = shared.forward(b, plan_for(b, shared.height, shared.width, spec, dense))
    return WeightField(cache.positions, cache.weights)
