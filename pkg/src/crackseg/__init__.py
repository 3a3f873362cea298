"""Crack segmentation with a dual CNN/transformer encoder.

Subpackages cover the transformer building blocks, the fused model, the loss
suite, pixel metrics, the dataset refinement pipeline, and a train/eval CLI.
"""

__version__ = "0.1.0"

from .losses import LossSpec, bce_dice_loss, bce_loss, dice_loss, recall_ce_loss
from .metrics import ConfusionCounts, MetricReport, aggregate_report, compute_metrics, confusion_counts
from .model import DualPathNet, FeaturePyramid, ModelConfig, load_checkpoint, save_checkpoint

__all__ = [
    "LossSpec",
    "bce_loss",
    "dice_loss",
    "bce_dice_loss",
    "recall_ce_loss",
    "ConfusionCounts",
    "MetricReport",
    "confusion_counts",
    "compute_metrics",
    "aggregate_report",
    "DualPathNet",
    "FeaturePyramid",
    "ModelConfig",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
