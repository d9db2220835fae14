"""Command-line entry point.

Machine-readable results go to stdout as JSON, diagnostics to stderr.
Exit codes: 0 success, 1 input or validation error, 2 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, pooling
from .attention import (
    AttentionParams,
    EmbeddingConfig,
    extract_rois,
    load_checkpoint,
    save_checkpoint,
    weight_field,
    worker_count,
)
from .cost import CostConfig, flops, measured_flops
from .gradients import gradient_errors
from .sampling import KINDS, SupportSpec, build_plan, dense_plan, random_rois
from .tensorio import TensorFormatError, read_mask, read_rois, read_tensor, write_tensor
from .train import TASKS, TrainConfig, config_to_dict, run_training
from .types import RoI, as_feature_map

METHODS = ("regular", "aligned", "deformable", "ps", "center", "masked")


class CliError(Exception):
    """Bad input; reported on stderr with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _require(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError(f"no such file or directory: {p}")


def _load_features(path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.ndim != 3:
        raise CliError(f"{path}: feature tensor must have dims [H, W, C_f], got {list(arr.shape)}")
    return as_feature_map(arr)


def _load_rois(path, stride: float) -> list[RoI]:
    if stride <= 0:
        raise CliError("--stride must be positive")
    rois = read_rois(path)
    if not rois:
        raise CliError(f"{path}: no RoIs")
    return [r.scaled(1.0 / stride) for r in rois] if stride != 1 else rois


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def _support_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--support", choices=KINDS, default="whole_image")
    p.add_argument("--max-in", type=int, default=196)
    p.add_argument("--max-out", type=int, default=196)


def _support(args) -> SupportSpec:
    try:
        return SupportSpec(args.support, args.max_in, args.max_out)
    except ValueError as exc:
        raise CliError(str(exc)) from None


# -- commands ----------------------------------------------------------------


def cmd_extract(args) -> int:
    _require(args.features, args.rois, args.checkpoint)
    x = _load_features(args.features)
    rois = _load_rois(args.rois, args.stride)
    params, cfg = load_checkpoint(args.checkpoint)
    if params.channels != x.shape[2]:
        raise CliError(f"{args.checkpoint}: expects C_f={params.channels}, features have {x.shape[2]}")
    out = extract_rois(x, rois, params, cfg, _support(args), dense=args.dense, workers=worker_count())
    _check_finite(out, "region features")
    write_tensor(args.out, out)
    _emit({"out": str(args.out), "shape": list(out.shape)})
    return 0


def pool_rois(x, rois, method: str, rows: int, cols: int, mode: str = "avg", samples: int = 1,
              mask=None, offsets=None, predictor=None) -> np.ndarray:
    """Run one baseline over every RoI, ``(N, K, C_f)``."""
    outs = []
    for i, b in enumerate(rois):
        grid = pooling.make_bin_grid(b, rows, cols)
        if method == "regular":
            y = pooling.regular_pool(x, b, grid, mode)
        elif method == "aligned":
            y = pooling.aligned_pool(x, b, grid, samples)
        elif method == "deformable":
            off = offsets[i] if offsets is not None else pooling.predict_offsets(x, b, predictor)
            y = pooling.deformable_pool(x, b, grid, off)
        elif method == "ps":
            y = pooling.ps_roi_pool(x, b, grid)
        elif method == "center":
            y = pooling.center_feature(x, b)
        elif method == "masked":
            y = pooling.masked_pool(x, b, grid, mask[i] if mask.ndim == 3 else mask)
        else:
            raise ValueError(f"unknown method {method!r}")
        outs.append(y)
    return np.stack(outs)


def cmd_pool(args) -> int:
    _require(args.features, args.rois, args.mask, args.offsets, args.offset_checkpoint)
    x = _load_features(args.features)
    rois = _load_rois(args.rois, args.stride)
    k = args.rows * args.cols
    mask = offsets = predictor = None
    if args.method == "ps" and x.shape[2] % k:
        raise CliError(f"ps pooling needs C_f divisible by K: C_f={x.shape[2]}, K={k}")
    if args.method == "masked":
        if args.mask is None:
            raise CliError("masked pooling requires --mask")
        mask = read_tensor(args.mask).astype(np.float64)
        if mask.shape[-2:] != x.shape[:2] or mask.ndim not in (2, 3):
            raise CliError(f"{args.mask}: mask dims {list(mask.shape)} do not match map {list(x.shape[:2])}")
        if mask.ndim == 3 and mask.shape[0] != len(rois):
            raise CliError(f"{args.mask}: {mask.shape[0]} masks for {len(rois)} RoIs")
    if args.method == "deformable":
        if args.offsets is not None:
            offsets = read_tensor(args.offsets).astype(np.float64)
            if offsets.shape != (len(rois), k, 2):
                raise CliError(f"{args.offsets}: offsets must have dims {[len(rois), k, 2]}, got {list(offsets.shape)}")
        elif args.offset_checkpoint is not None:
            predictor = pooling.load_offset_predictor(args.offset_checkpoint)
            if (predictor.rows, predictor.cols, predictor.channels) != (args.rows, args.cols, x.shape[2]):
                raise CliError(f"{args.offset_checkpoint}: predictor does not match grid/channels")
        else:
            raise CliError("deformable pooling requires --offsets or --offset-checkpoint")
    out = pool_rois(x, rois, args.method, args.rows, args.cols, args.mode, args.samples,
                    mask, offsets, predictor)
    _check_finite(out, "pooled features")
    write_tensor(args.out, out)
    _emit({"method": args.method, "out": str(args.out), "shape": list(out.shape)})
    return 0


def cmd_train(args) -> int:
    overrides = {k: v for k, v in {
        "task": args.task, "steps": args.steps, "seed": args.seed, "lr": args.lr,
        "map_size": args.map_size, "channels": args.channels, "grid": args.grid,
        "embed_dim": args.embed_dim, "transform_dim": args.transform_dim,
        "log_interval": args.log_interval, "clip_norm": args.clip_norm,
    }.items() if v is not None}
    try:
        cfg = TrainConfig(**overrides)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    log = run_training(cfg)
    if args.out is not None:
        save_checkpoint(args.out, log.params)
        with open(Path(args.out) / "train_config.json", "w") as fh:
            json.dump(config_to_dict(cfg), fh, sort_keys=True)
    if args.log is not None:
        with open(args.log, "w") as fh:
            fh.write(log.to_jsonl())
    first, last = log.records[0], log.records[-1]
    _emit({"task": cfg.task, "steps": cfg.steps, "initial": first, "final": last})
    return 0


def _random_params(rng, k, ce, cg, cf, scale) -> AttentionParams:
    return AttentionParams(
        v_box=rng.normal(0, scale, (ce, 4 * ce)),
        w_box_hat=rng.normal(0, scale, (k, cg, ce)),
        w_im=rng.normal(0, scale, (cg, 2 * ce)),
        w_app=rng.normal(0, scale, (k, cf)),
    )


def cmd_gradcheck(args) -> int:
    if args.eps <= 0:
        raise CliError("--eps must be positive")
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.h, args.w, args.cf))
    params = _random_params(rng, args.k, args.ce, args.cg, args.cf, args.scale)
    b = random_rois(rng, args.h, args.w, 1, min_side=1.0)[0]
    errors = gradient_errors(x, b, params, EmbeddingConfig(args.ce, args.cg), _support(args),
                             eps=args.eps, seed=args.seed)
    _emit({"max_rel_error": max(errors.values()), "per_tensor": errors, "roi": list(b.as_tuple())})
    return 0


def cmd_flops(args) -> int:
    try:
        cfg = CostConfig(args.n, args.k, args.ce, args.cg, args.cf, args.h, args.w, args.omega)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    _emit(flops(cfg).as_dict())
    return 0


def bench_costs(height, width, rois, spec: SupportSpec, k, ce, cg, cf) -> tuple[int, int]:
    """Cost-model FLOPs for dense and sparse sampling of the same RoIs."""
    base = CostConfig(n=len(rois), k=k, ce=ce, cg=cg, cf=cf, h=height, w=width)
    _, dense = measured_flops([dense_plan(b, height, width, spec) for b in rois], base)
    _, sparse = measured_flops([build_plan(b, height, width, spec) for b in rois], base)
    return dense.total, sparse.total


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise CliError("--reps must be at least 1")
    if args.rois < 1:
        raise CliError("--rois must be at least 1")
    spec = _support(args)
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.h, args.w, args.cf))
    params = _random_params(rng, args.k, args.ce, args.cg, args.cf, 0.01)
    cfg = EmbeddingConfig(args.ce, args.cg)
    rois = random_rois(rng, args.h, args.w, args.rois)
    workers = worker_count()

    def timed(dense):
        best, out = float("inf"), None
        for _ in range(args.reps):
            t0 = time.perf_counter()
            out = extract_rois(x, rois, params, cfg, spec, dense=dense, workers=workers)
            best = min(best, time.perf_counter() - t0)
        return 1e3 * best, out

    dense_ms, dense_out = timed(True)
    sparse_ms, sparse_out = timed(False)
    _check_finite(dense_out, "dense features")
    _check_finite(sparse_out, "sparse features")
    dense_flops, sparse_flops = bench_costs(args.h, args.w, rois, spec, args.k, args.ce, args.cg, args.cf)
    _emit({
        "dense_ms": dense_ms,
        "sparse_ms": sparse_ms,
        "speedup": dense_ms / sparse_ms if sparse_ms > 0 else float("inf"),
        "dense_flops": dense_flops,
        "sparse_flops": sparse_flops,
        "identical": bool(np.array_equal(dense_out, sparse_out)),
    })
    return 0


def analyze_rois(x, rois, params, cfg, spec, mask, export_dir=None) -> list[dict]:
    height, width, _ = x.shape
    rows = []
    for i, b in enumerate(rois):
        wm = analysis.dense_weight_map(weight_field(x, b, params, cfg, spec), height, width)
        m = mask[i] if mask.ndim == 3 else mask
        row = {"roi_index": i, "mean_kl_parts": analysis.mean_kl_between_parts(wm) if len(wm) > 1 else None,
               "kl_of_mask": analysis.kl_of_mask(wm, m)}
        rows.append(row)
        if export_dir is not None:
            analysis.export_weight_map(wm, Path(export_dir) / f"roi{i:04d}_max.pgm", "max")
    return rows


def cmd_analyze(args) -> int:
    _require(args.checkpoint, args.features, args.rois, args.mask)
    x = _load_features(args.features)
    rois = _load_rois(args.rois, args.stride)
    params, cfg = load_checkpoint(args.checkpoint)
    if params.channels != x.shape[2]:
        raise CliError(f"{args.checkpoint}: expects C_f={params.channels}, features have {x.shape[2]}")
    mask = read_tensor(args.mask).astype(np.float64)
    if mask.ndim == 2:
        mask = read_mask(args.mask, x.shape[:2])
    elif mask.ndim != 3 or mask.shape[0] != len(rois) or mask.shape[1:] != x.shape[:2]:
        raise CliError(f"{args.mask}: mask dims {list(mask.shape)} do not fit {len(rois)} RoIs on {list(x.shape[:2])}")
    if np.any(mask.reshape(-1, x.shape[0] * x.shape[1]).sum(axis=1) == 0):
        raise CliError(f"{args.mask}: every mask needs at least one foreground cell")
    if args.export_dir is not None:
        Path(args.export_dir).mkdir(parents=True, exist_ok=True)
    for row in analyze_rois(x, rois, params, cfg, _support(args), mask, args.export_dir):
        _emit(row)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionfeat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="learnable region features for a list of RoIs")
    p.add_argument("--features", required=True)
    p.add_argument("--rois", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=float, default=1.0, help="divide RoI coordinates by this (pixel input)")
    p.add_argument("--dense", action="store_true", help="enumerate the whole support region")
    _support_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pool", help="baseline RoI pooling")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--rois", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rows", type=int, default=7)
    p.add_argument("--cols", type=int, default=7)
    p.add_argument("--mode", choices=("avg", "max"), default="avg")
    p.add_argument("--samples", type=int, choices=(1, 4), default=1)
    p.add_argument("--mask")
    p.add_argument("--offsets")
    p.add_argument("--offset-checkpoint")
    p.add_argument("--stride", type=float, default=1.0)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="toy-scale training on synthetic scenes")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--map-size", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--transform-dim", type=int)
    p.add_argument("--log-interval", type=int)
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--log", help="JSON-lines training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--h", type=int, default=6)
    p.add_argument("--w", type=int, default=6)
    p.add_argument("--cf", type=int, default=3)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--ce", type=int, default=4)
    p.add_argument("--cg", type=int, default=3)
    p.add_argument("--scale", type=float, default=0.3, help="std of random parameters")
    _support_args(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="cost-model FLOPs per stage")
    for flag, default in (("n", 300), ("k", 49), ("ce", 512), ("cg", 256), ("cf", 256),
                          ("h", 45), ("w", 50), ("omega", 200)):
        p.add_argument(f"--{flag}", type=int, default=default)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="dense vs sparse extraction timing")
    p.add_argument("--h", type=int, default=48)
    p.add_argument("--w", type=int, default=48)
    p.add_argument("--cf", type=int, default=256)
    p.add_argument("--k", type=int, default=49)
    p.add_argument("--ce", type=int, default=512)
    p.add_argument("--cg", type=int, default=256)
    p.add_argument("--rois", type=int, default=300)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    _support_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="weight-distribution metrics per RoI")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--rois", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--stride", type=float, default=1.0)
    p.add_argument("--export-dir")
    _support_args(p)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (CliError, TensorFormatError, ValueError, KeyError, OSError) as exc:
        print(f"regionfeat: error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"regionfeat: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
