"""Small experiment drivers shared by the gallery scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample
from .model import ModelConfig, SegModel, VariantConfig
from .training import CombinationReport, LossWeights, evaluate_combinations, train


@dataclass
class VariantRun:
    variant: str
    seed: int
    losses: list[float]
    report: CombinationReport


def run_variant(name: str, seed: int, train_set: Sequence[Sample], eval_set: Sequence[Sample],
                steps: int, batch_size: int = 4, lr: float = 1e-3,
                config: ModelConfig = ModelConfig(),
                weights: LossWeights = LossWeights()) -> VariantRun:
    model = SegModel(config, VariantConfig.named(name), seed=seed)
    result = train(model, train_set, steps, batch_size, seed, lr, weights)
    return VariantRun(name, seed, result.losses, evaluate_combinations(model, eval_set))


def ablation_table(runs: Sequence[VariantRun]) -> dict[str, dict[str, float]]:
    """Median Average/Top-1/Last-1 per variant across seeds."""
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(r.variant for r in runs):
        rs = [r.report for r in runs if r.variant == name]
        out[name] = {
            "average": float(np.median([r.average for r in rs])),
            "top1": float(np.median([r.top1 for r in rs])),
            "last1": float(np.median([r.last1 for r in rs])),
        }
    return out
