"""Backward pass of :func:`regionfeat.attention.extract` and a finite-difference check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    EmbeddingConfig,
    ForwardCache,
    SharedMaps,
    extract,
    plan_for,
)
from .sampling import SupportSpec
from .types import RoI, as_feature_map


@dataclass
class GradientBundle:
    d_x: np.ndarray
    d_params: dict[str, np.ndarray]


def backward_cache(cache: ForwardCache, shared: SharedMaps, upstream: np.ndarray,
                   d_x: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * y)`` for one RoI.

    Parameter gradients are returned; the feature gradient is accumulated
    into the flat ``(H*W, C_f)`` buffer ``d_x`` when one is given.
    """
    params = shared.params
    w, feats = cache.weights, cache.features
    # d loss / d weight[k, j] = <upstream_k, x(p_j)>
    d_w = upstream @ feats.T
    d_logits = w * (d_w - np.sum(w * d_w, axis=1, keepdims=True))

    d_w_app = d_logits @ feats
    d_queries = d_logits @ cache.keys
    d_keys = d_logits.T @ cache.queries
    d_w_im = d_keys.T @ shared.embeddings[cache.flat_index]
    d_w_box_hat = d_queries[:, :, None] * cache.reduced_box[None, None, :]
    d_reduced = np.einsum("kgc,kg->c", params.w_box_hat, d_queries)
    d_v_box = np.outer(d_reduced, cache.box_embedding)

    if d_x is not None:
        # aggregation path and appearance-logit path
        d_feats = w.T @ upstream + d_logits.T @ params.w_app
        np.add.at(d_x, cache.flat_index, d_feats)
    return {"v_box": d_v_box, "w_box_hat": d_w_box_hat, "w_im": d_w_im, "w_app": d_w_app}


def backward_extract(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
                     spec: SupportSpec, upstream, dense: bool = False) -> GradientBundle:
    shared = SharedMaps(x, params, cfg)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.num_parts, params.channels):
        raise ValueError(f"upstream gradient must be {(params.num_parts, params.channels)}, got {upstream.shape}")
    cache = shared.forward(b, plan_for(b, shared.height, shared.width, spec, dense))
    d_x = np.zeros_like(shared.flat_x)
    d_params = backward_cache(cache, shared, upstream, d_x)
    return GradientBundle(d_x.reshape(shared.x.shape), d_params)


def _loss(x, b, params, cfg, spec, upstream) -> float:
    return float(np.sum(upstream * extract(x, b, params, cfg, spec)))


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def numeric_gradients(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
                      spec: SupportSpec, upstream, eps: float = 1e-3) -> GradientBundle:
    """Central differences of ``sum(upstream * extract(...))`` over every input coordinate."""
    x = as_feature_map(x).copy()

    def central(arr, rebuild):
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = rebuild()
            flat[i] = orig - eps
            lo = rebuild()
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
        return grad

    d_x = central(x, lambda: _loss(x, b, params, cfg, spec, upstream))
    tensors = {k: v.copy() for k, v in params.tensors().items()}
    d_params = {}
    for name in tensors:
        d_params[name] = central(
            tensors[name], lambda: _loss(x, b, AttentionParams(**tensors), cfg, spec, upstream)
        )
    return GradientBundle(d_x, d_params)


def gradient_errors(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
                    spec: SupportSpec = SupportSpec(), eps: float = 1e-3, seed: int = 0,
                    backward=backward_extract) -> dict[str, float]:
    """Max relative error between analytic and numeric gradients, per tensor."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal((params.num_parts, params.channels))
    analytic = backward(x, b, params, cfg, spec, upstream)
    numeric = numeric_gradients(x, b, params, cfg, spec, upstream, eps)
    errors = {"d_x": float(relative_error(analytic.d_x, numeric.d_x).max())}
    for name, grad in numeric.d_params.items():
        errors[f"d_{name}"] = float(relative_error(analytic.d_params[name], grad).max())
    return errors


def finite_diff_check(x, b: RoI, params: AttentionParams, cfg: EmbeddingConfig,
                      spec: SupportSpec = SupportSpec(), eps: float = 1e-3, seed: int = 0,
                      backward=backward_extract) -> float:
    """Largest relative error over all gradient entries; ``backward`` is swappable for fault injection."""
    return max(gradient_errors(x, b, params, cfg, spec, eps, seed, backward).values())
