"""Coupled training objective, training loop and all-subset evaluation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, Tensor, cross_entropy
from .data import Sample, collate
from .model import SegModel, rng_stream
from .modality import DEFAULT_NAMES, subsets_within

IGNORE_ID = 255


@dataclass(frozen=True)
class LossWeights:
    col: float = 1.0
    ine: float = 1.0
    align: float = 0.0

    def __post_init__(self):
        if min(self.col, self.ine, self.align) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.col + self.ine <= 0:
            raise ValueError("at least one of the pathway weights must be positive")


def mass_loss(logits_col: Tensor, logits_ine: Tensor | None, labels: np.ndarray,
              weights: LossWeights = LossWeights(), align: Tensor | None = None,
              ignore_id: int = IGNORE_ID) -> Tensor:
    """Weighted sum of the two pathway cross-entropies (plus optional alignment)."""
    loss = cross_entropy(logits_col, labels, ignore_id) * weights.col
    if logits_ine is not None and weights.ine > 0:
        loss = loss + cross_entropy(logits_ine, labels, ignore_id) * weights.ine
    if align is not None and weights.align > 0:
        loss = loss + align * weights.align
    return loss


class TrainingDiverged(RuntimeError):
    pass


def effective_weights(model: SegModel, weights: LossWeights) -> LossWeights:
    """Force the individual-enhancement weight to zero when that pathway is off."""
    if model.variant.use_ine:
        return weights
    return LossWeights(col=weights.col, ine=0.0, align=weights.align)


def train_step(batch: Sequence[Sample], model: SegModel, optimizer: Adam, seed: int, step: int,
               weights: LossWeights = LossWeights()) -> float:
    """Forward both pathways, back-propagate the combined loss, apply one Adam update."""
    if not batch:
        raise ValueError("empty batch")
    images, labels = collate(batch)
    weights = effective_weights(model, weights)
    optimizer.zero_grad()
    out = model.forward_train(images, seed, step)
    loss = mass_loss(out.logits_col, out.logits_ine, labels, weights, out.align)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    return rng_stream(seed, step, 0, 2).choice(n, size=min(batch_size, n), replace=False)


@dataclass
class TrainResult:
    losses: list[float]
    steps: int


def train(model: SegModel, samples: Sequence[Sample], steps: int, batch_size: int = 4,
          seed: int = 7, lr: float = 1e-3, weights: LossWeights = LossWeights(),
          optimizer: Adam | None = None, start_step: int = 0,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run ``steps`` training steps; batches are drawn per step from (seed, step)."""
    if not samples:
        raise ValueError("empty training set")
    opt = optimizer or Adam(model.parameters(), lr=lr)
    losses = []
    for step in range(start_step, start_step + steps):
        idx = batch_indices(len(samples), batch_size, seed, step)
        try:
            loss = train_step([samples[i] for i in idx], model, opt, seed, step, weights)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return TrainResult(losses, start_step + steps)


def format_loss_log(losses: Sequence[float], start_step: int = 0) -> str:
    return "".join(f"{start_step + i} {loss!r}\n" for i, loss in enumerate(losses))


# ---------------------------------------------------------------------------
# metrics

def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int = IGNORE_ID):
    """Per-class IoU (nan where a class is absent from both maps) and their mean."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    valid = gt != ignore_id
    p, g = pred[valid], gt[valid]
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError("label ids outside [0, num_classes)")
    inter = np.bincount(g[p == g], minlength=num_classes)[:num_classes].astype(float)
    area_p = np.bincount(p[(p >= 0) & (p < num_classes)], minlength=num_classes)[:num_classes]
    area_g = np.bincount(g, minlength=num_classes)[:num_classes]
    union = area_p + area_g - inter
    present = union > 0
    if not present.any():
        raise ValueError("no class present in prediction or ground truth")
    iou = np.full(num_classes, np.nan)
    iou[present] = inter[present] / union[present]
    return iou, float(np.mean(iou[present]))


@dataclass
class CombinationReport:
    modality_names: tuple[str, ...]
    subsets: list[tuple[int, ...]]
    scores: list[float]
    per_scene: np.ndarray | None = field(default=None, repr=False)  # [subsets, scenes]

    def __post_init__(self):
        if len(self.subsets) != len(self.scores) or not self.subsets:
            raise ValueError("a report needs one score per subset")

    @property
    def average(self) -> float:
        return float(np.mean(self.scores))

    @property
    def top1(self) -> float:
        return float(np.max(self.scores))

    @property
    def last1(self) -> float:
        return float(np.min(self.scores))

    def score(self, subset: Sequence[int]) -> float:
        return self.scores[self.subsets.index(tuple(sorted(subset)))]

    def to_dict(self) -> dict:
        return {
            "average_miou": self.average,
            "top1_miou": self.top1,
            "last1_miou": self.last1,
            "modalities": list(self.modality_names),
            "subsets": [{"modalities": [self.modality_names[i] for i in s], "miou": v}
                        for s, v in zip(self.subsets, self.scores)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CombinationReport":
        doc = json.loads(text)
        names = tuple(doc["modalities"])
        subsets = [tuple(names.index(n) for n in row["modalities"]) for row in doc["subsets"]]
        return cls(names, subsets, [float(row["miou"]) for row in doc["subsets"]])


def _scene_scores(model: SegModel, samples: Sequence[Sample], subsets, batch_size: int,
                  num_classes: int, workers: int) -> np.ndarray:
    out = np.zeros((len(subsets), len(samples)))
    needed = sorted({m for s in subsets for m in s})
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, labels = collate(chunk, needed)
        cache = model.prepare(images)
        size = labels.shape[-2:]

        def run(j):
            pred = np.argmax(model.fuse(cache, subsets[j], size).data, axis=1)
            return [miou(p, g, num_classes)[1] for p, g in zip(pred, labels)]

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run, range(len(subsets))))
        else:
            rows = [run(j) for j in range(len(subsets))]
        out[:, start:start + len(chunk)] = np.asarray(rows)
    return out


def evaluate_combinations(model: SegModel, samples: Sequence[Sample],
                          modalities: Sequence[int] | None = None, batch_size: int = 16,
                          workers: int = 1) -> CombinationReport:
    """Per-scene mIoU averaged over scenes for every non-empty subset of ``modalities``."""
    if not samples:
        raise ValueError("empty evaluation set")
    mods = list(range(model.config.num_modalities)) if modalities is None else sorted(modalities)
    if not mods:
        raise ValueError("need at least one modality to evaluate")
    subsets = subsets_within(mods)
    per_scene = _scene_scores(model, samples, subsets, batch_size, model.config.num_classes, workers)
    return CombinationReport(tuple(model.config.modalities), subsets,
                             [float(x) for x in per_scene.mean(axis=1)], per_scene)


def evaluate_subset(model: SegModel, samples: Sequence[Sample], subset: Sequence[int],
                    batch_size: int = 16) -> float:
    sub = [tuple(sorted(subset))]
    return float(_scene_scores(model, samples, sub, batch_size, model.config.num_classes, 1).mean())


def top1_last1_rates(report: CombinationReport) -> dict[str, dict[int, float]]:
    """Frequency, by subset size, of the per-scene best and worst subset.

    Ties go to the earliest subset in report order (smaller subsets first).
    """
    if report.per_scene is None:
        raise ValueError("report carries no per-scene scores")
    sizes = np.array([len(s) for s in report.subsets])
    n_scenes = report.per_scene.shape[1]
    size_keys = sorted(set(sizes.tolist()))
    best = sizes[np.argmax(report.per_scene, axis=0)]
    worst = sizes[np.argmin(report.per_scene, axis=0)]
    return {
        "top1": {k: float(np.sum(best == k)) / n_scenes for k in size_keys},
        "last1": {k: float(np.sum(worst == k)) / n_scenes for k in size_keys},
    }


def write_report(path, report: CombinationReport) -> None:
    Path(path).write_text(report.to_json())


def read_report(path) -> CombinationReport:
    return CombinationReport.from_json(Path(path).read_text())


__all__ = [
    "CombinationReport", "IGNORE_ID", "LossWeights", "TrainResult", "TrainingDiverged",
    "batch_indices", "evaluate_combinations", "evaluate_subset", "format_loss_log", "mass_loss",
    "miou", "read_report", "top1_last1_rates", "train", "train_step", "write_report",
    "DEFAULT_NAMES",
]
