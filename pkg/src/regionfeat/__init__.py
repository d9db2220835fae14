"""Region feature extraction: RoI pooling baselines and a learnable attention-weighted extractor."""

from .analysis import export_weight_map, kl_of_mask, mean_kl_between_parts
from .attention import (
    AttentionParams,
    EmbeddingConfig,
    aggregate,
    combine_weights,
    extract,
    extract_rois,
    load_checkpoint,
    save_checkpoint,
    weight_field,
)
from .cost import CostBreakdown, CostConfig, flops
from .gradients import backward_extract, finite_diff_check
from .pooling import (
    aligned_pool,
    center_feature,
    deformable_pool,
    make_bin_grid,
    masked_pool,
    ps_roi_pool,
    regular_pool,
)
from .sampling import SamplingPlan, SupportSpec, build_plan, dense_plan
from .tensorio import read_tensor, write_tensor
from .train import TrainConfig, run_training
from .types import RoI, WeightField

__version__ = "0.1.0"

__all__ = [
    "AttentionParams", "CostBreakdown", "CostConfig", "EmbeddingConfig", "RoI",
    "SamplingPlan", "SupportSpec", "TrainConfig", "WeightField",
    "aggregate", "aligned_pool", "backward_extract", "build_plan", "center_feature",
    "combine_weights", "deformable_pool", "dense_plan", "export_weight_map", "extract",
    "extract_rois", "finite_diff_check", "flops", "kl_of_mask", "load_checkpoint",
    "make_bin_grid", "masked_pool", "mean_kl_between_parts", "ps_roi_pool", "read_tensor",
    "regular_pool", "run_training", "save_checkpoint", "weight_field", "write_tensor",
]
