"""Modality-agnostic multimodal semantic segmentation on a numpy autodiff core."""

from .data import SceneSpec, Sample, VisibilityMatrix, degrade, generate, mask_blocks
from .model import ModelConfig, SegModel, VariantConfig
from .training import (
    CombinationReport, LossWeights, evaluate_combinations, mass_loss, miou, top1_last1_rates,
    train, train_step,
)

__version__ = "0.1.0"

__all__ = [
    "CombinationReport", "LossWeights", "ModelConfig", "Sample", "SceneSpec", "SegModel",
    "VariantConfig", "VisibilityMatrix", "degrade", "evaluate_combinations", "generate",
    "mask_blocks", "mass_loss", "miou", "top1_last1_rates", "train", "train_step",
]
