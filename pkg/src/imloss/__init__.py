"""Loss-function laboratory for class-imbalanced segmentation.

Exact implementations of the Dice/cross-entropy loss hierarchy through
the Unified Focal loss, with analytic gradients, finite-difference and
scalar-reference oracles, synthetic imbalanced benchmark scenes, and a
desk-scale training harness.
"""

from .losses import (
    FAMILIES,
    PRESETS,
    LossOutput,
    LossSpec,
    LossSpecError,
    evaluate,
    gradient,
    loss_value,
    spec_from_json,
    spec_to_json,
)
from .metrics import compute_metrics, confusion, mean_ci, wilcoxon_rank_sum
from .numerics import clip_probs, one_hot, softmax
from .oracle import finite_diff_grad, reference_loss, run_gradcheck
from .synth import PRESET_SCENES, SceneConfig, generate, imbalance_stats, split
from .trainer import TinySegNet, TrainConfig, init_xavier, train

__version__ = "0.1.0"

__all__ = [
    "FAMILIES",
    "PRESETS",
    "PRESET_SCENES",
    "LossOutput",
    "LossSpec",
    "LossSpecError",
    "SceneConfig",
    "TinySegNet",
    "TrainConfig",
    "clip_probs",
    "compute_metrics",
    "confusion",
    "evaluate",
    "finite_diff_grad",
    "generate",
    "gradient",
    "imbalance_stats",
    "init_xavier",
    "loss_value",
    "mean_ci",
    "one_hot",
    "reference_loss",
    "run_gradcheck",
    "softmax",
    "spec_from_json",
    "spec_to_json",
    "split",
    "train",
    "wilcoxon_rank_sum",
    "__version__",
]
