"""FLOP accounting for the learnable extractor, stage by stage."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace


@dataclass(frozen=True)
class CostConfig:
    n: int = 300
    k: int = 49
    ce: int = 512
    cg: int = 256
    cf: int = 256
    h: int = 45
    w: int = 50
    omega: int = 200

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class CostBreakdown:
    """Per-stage FLOPs.

    p1: position-embedding transform, p2: box-embedding transform,
    p3: geometric inner products, p4: appearance 1x1 conv,
    p5: weighted aggregation.
    """

    p1: int
    p2: int
    p3: int
    p4: int
    p5: int

    @property
    def total(self) -> int:
        return self.p1 + self.p2 + self.p3 + self.p4 + self.p5

    def as_dict(self) -> dict[str, int]:
        return {**asdict(self), "total": self.total}


def flops(cfg: CostConfig) -> CostBreakdown:
    hw = cfg.h * cfg.w
    return CostBreakdown(
        p1=2 * hw * cfg.ce * cfg.cg,
        p2=cfg.n * cfg.ce * (cfg.k * cfg.cg + 4 * cfg.ce),
        p3=cfg.n * cfg.k * cfg.omega * cfg.cg,
        p4=hw * cfg.k * cfg.cf,
        p5=cfg.n * cfg.k * cfg.omega * cfg.cf,
    )


def mean_plan_size(plans) -> float:
    plans = list(plans)
    if not plans:
        raise ValueError("need at least one plan")
    return sum(p.size for p in plans) / len(plans)


def measured_flops(plans, cfg: CostConfig) -> tuple[float, CostBreakdown]:
    """Average sampled positions per RoI and the cost at that average.

    The average is rounded to the nearest integer before costing; ``n``
    becomes the number of plans.
    """
    plans = list(plans)
    avg = mean_plan_size(plans)
    costed = replace(cfg, n=len(plans), omega=max(1, round(avg)))
    return avg, flops(costed)
