"""Toy-scale training of the learnable extractor on synthetic scenes.

Tasks:
    distill_aligned / distill_regular: match aligned (1 sample per bin) or
        regular average pooling on random Gaussian maps and random RoIs.
    mask_fit: each scene holds one rectangular object whose features are
        shifted by ``object_shift``; the RoI is the object box and the target
        is masked pooling of the object.

Every ``log_interval`` steps a fixed, seeded evaluation batch is scored, so
logged metrics depend only on the current parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import analysis
from .attention import AttentionParams, EmbeddingConfig, SharedMaps
from .gradients import backward_cache
from .pooling import aligned_pool, make_bin_grid, masked_pool, regular_pool
from .sampling import SupportSpec, build_plan
from .types import RoI, WeightField

TASKS = ("distill_aligned", "distill_regular", "mask_fit")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "mask_fit"
    seed: int = 0
    steps: int = 2000
    lr: float = 0.5
    lr_decay_at: tuple[float, ...] = (2 / 3,)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 0.25
    init_sigma: float = 0.01
    map_size: int = 20
    channels: int = 8
    grid: int = 3
    embed_dim: int = 32
    transform_dim: int = 16
    rois_per_step: int = 4
    min_side: int = 5
    max_side: int = 12
    object_shift: float = 2.0
    support: str = "whole_image"
    max_in: int = 196
    max_out: int = 196
    log_interval: int = 50
    eval_rois: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 1 <= self.min_side <= self.max_side <= self.map_size:
            raise ValueError("need 1 <= min_side <= max_side <= map_size")
        if self.log_interval < 1:
            raise ValueError("log_interval must be positive")

    @property
    def num_parts(self) -> int:
        return self.grid * self.grid

    def support_spec(self) -> SupportSpec:
        return SupportSpec(self.support, self.max_in, self.max_out)

    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(dim=self.embed_dim, transform_dim=self.transform_dim)

    def learning_rate(self, step: int) -> float:
        lr = self.lr
        for frac in self.lr_decay_at:
            if step >= frac * self.steps:
                lr *= self.lr_decay
        return lr


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    params: AttentionParams | None = None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


@dataclass(frozen=True)
class Scene:
    x: np.ndarray
    roi: RoI
    mask: np.ndarray
    target: np.ndarray


def init_params(cfg: TrainConfig, num_parts: int, embed_dim: int, transform_dim: int,
                channels: int, seed: int) -> AttentionParams:
    """I.i.d. Gaussian(0, init_sigma^2) entries from a seeded generator."""
    rng = np.random.default_rng(seed)
    sigma = cfg.init_sigma
    return AttentionParams(
        v_box=rng.normal(0.0, sigma, (embed_dim, 4 * embed_dim)),
        w_box_hat=rng.normal(0.0, sigma, (num_parts, transform_dim, embed_dim)),
        w_im=rng.normal(0.0, sigma, (transform_dim, 2 * embed_dim)),
        w_app=rng.normal(0.0, sigma, (num_parts, channels)),
    )


def sgd_step(params: AttentionParams, grads: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float, state: dict | None = None):
    """Momentum SGD with L2 weight decay.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    Returns ``(new_params, new_state)``.
    """
    state = dict(state or {})
    new = {}
    for name, value in params.tensors().items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        v = momentum * state.get(name, np.zeros_like(value)) + (g + weight_decay * value)
        state[name] = v
        new[name] = value - lr * v
    return AttentionParams(**new), state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _random_box(rng: np.random.Generator, cfg: TrainConfig) -> RoI:
    w, h = rng.integers(cfg.min_side, cfg.max_side + 1, size=2)
    x1 = rng.integers(0, cfg.map_size - w + 1)
    y1 = rng.integers(0, cfg.map_size - h + 1)
    return RoI(float(x1), float(y1), float(x1 + w), float(y1 + h))


def make_scene(rng: np.random.Generator, cfg: TrainConfig) -> Scene:
    size = cfg.map_size
    x = rng.standard_normal((size, size, cfg.channels))
    roi = _random_box(rng, cfg)
    mask = np.zeros((size, size))
    mask[int(roi.y1):int(roi.y2), int(roi.x1):int(roi.x2)] = 1.0
    grid = make_bin_grid(roi, cfg.grid, cfg.grid)
    if cfg.task == "mask_fit":
        x[mask == 1.0] += cfg.object_shift
        target = masked_pool(x, roi, grid, mask)
    elif cfg.task == "distill_aligned":
        target = aligned_pool(x, roi, grid, 1)
    else:
        target = regular_pool(x, roi, grid, "avg")
    return Scene(x, roi, mask, target)


def _scene_pass(scene: Scene, params: AttentionParams, cfg: TrainConfig, with_grad: bool):
    emb = cfg.embedding()
    shared = SharedMaps(scene.x, params, emb)
    cache = shared.forward(scene.roi, build_plan(scene.roi, cfg.map_size, cfg.map_size, cfg.support_spec()))
    diff = cache.output - scene.target
    loss = float(np.mean(diff ** 2))
    grads = None
    if with_grad:
        grads = backward_cache(cache, shared, 2.0 * diff / diff.size)
    return loss, grads, cache


def batch_loss(scenes, params: AttentionParams, cfg: TrainConfig, with_grad: bool = False):
    """Mean loss over scenes and, optionally, the mean parameter gradients."""
    total = 0.0
    grads = None
    for scene in scenes:
        loss, g, _ = _scene_pass(scene, params, cfg, with_grad)
        total += loss
        if with_grad:
            grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    n = len(scenes)
    if with_grad:
        grads = {k: v / n for k, v in grads.items()}
    return total / n, grads


def evaluate(scenes, params: AttentionParams, cfg: TrainConfig) -> dict:
    losses, kl_parts, kl_mask, in_mass = [], [], [], []
    for scene in scenes:
        loss, _, cache = _scene_pass(scene, params, cfg, with_grad=False)
        if not np.isfinite(loss):
            raise FloatingPointError("evaluation loss became non-finite")
        losses.append(loss)
        wm = analysis.dense_weight_map(WeightField(cache.positions, cache.weights), cfg.map_size, cfg.map_size)
        kl_parts.append(analysis.mean_kl_between_parts(wm))
        if cfg.task == "mask_fit":
            kl_mask.append(analysis.kl_of_mask(wm, scene.mask))
        b = scene.roi
        pos = cache.positions + 0.5
        inside = (pos[:, 0] >= b.x1) & (pos[:, 0] < b.x2) & (pos[:, 1] >= b.y1) & (pos[:, 1] < b.y2)
        in_mass.append(float(cache.weights[:, inside].sum(axis=1).mean()))
    return {
        "loss": sum(losses) / len(losses),
        "mean_kl_parts": float(np.mean(kl_parts)),
        "kl_of_mask": float(np.mean(kl_mask)) if kl_mask else None,
        "in_roi_mass": float(np.mean(in_mass)),
    }


def run_training(cfg: TrainConfig) -> TrainLog:
    seq = np.random.SeedSequence(cfg.seed)
    init_seed, train_seq, eval_seq = seq.spawn(3)
    params = init_params(cfg, cfg.num_parts, cfg.embed_dim, cfg.transform_dim, cfg.channels,
                         int(init_seed.generate_state(1)[0]))
    train_rng = np.random.default_rng(train_seq)
    eval_rng = np.random.default_rng(eval_seq)
    eval_scenes = [make_scene(eval_rng, cfg) for _ in range(cfg.eval_rois)]

    log = TrainLog()
    state: dict = {}
    for step in range(cfg.steps + 1):
        if step % cfg.log_interval == 0 or step == cfg.steps:
            record = {"step": step, "lr": cfg.learning_rate(min(step, cfg.steps - 1))}
            try:
                record.update(evaluate(eval_scenes, params, cfg))
            except FloatingPointError:
                raise FloatingPointError(f"loss became non-finite at step {step}") from None
            log.records.append(record)
        if step == cfg.steps:
            break
        scenes = [make_scene(train_rng, cfg) for _ in range(cfg.rois_per_step)]
        loss, grads = batch_loss(scenes, params, cfg, with_grad=True)
        if not np.isfinite(loss):
            raise FloatingPointError(f"training loss became non-finite at step {step}")
        if cfg.clip_norm > 0:
            grads = clip_gradients(grads, cfg.clip_norm)
        params, state = sgd_step(params, grads, cfg.learning_rate(step), cfg.momentum,
                                 cfg.weight_decay, state)
    log.params = params
    return log


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    if "lr_decay_at" in raw:
        raw["lr_decay_at"] = tuple(raw["lr_decay_at"])
    return TrainConfig(**raw)


def config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["lr_decay_at"] = list(cfg.lr_decay_at)
    return out
