"""Full segmentation model: shared encoder, per-scale fusion, shared head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, concat, conv2d, no_grad
from .encoder import EncoderParams, encode_batch, init_encoder
from .head import SegHeadParams, decode, init_seg_head
from .modality import DEFAULT_NAMES
from .mpu import MpuBlockParams, init_mpu_stack
from .params import named_tensors
from .pathways import (
    RobustnessEvaluatorParams, SemanticProjectorParams, col_forward, ine_forward,
    init_robustness_evaluator, init_semantic_projector, kl_alignment_loss, normalize_scores,
    project_all,
)


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...] = DEFAULT_NAMES
    num_classes: int = 5
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    encoder_depth: int = 2
    mpu_depth: int = 2
    heads: int = 2
    windows: tuple[int, ...] = (4, 4, 2, 2)
    dec_channels: int = 64

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.windows) != 4:
            raise ValueError("channels and windows need one entry per scale (4)")
        if any(c % self.heads for c in self.channels):
            raise ValueError("every channel width must be divisible by the head count")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def num_modalities(self) -> int:
        return len(self.modalities)


@dataclass(frozen=True)
class VariantConfig:
    """Ablation switches.

    The main fused prediction always exists: with ``use_col`` off it is a
    plain mean of projected features instead of the robustness-weighted
    query with reassembled context.
    """

    use_mpu: bool = True
    use_col: bool = True
    use_ine: bool = True
    use_kl_align: bool = False
    allow_align_with_mpu: bool = False

    def __post_init__(self):
        if self.use_kl_align and self.use_mpu and not self.allow_align_with_mpu:
            raise ValueError("explicit alignment replaces the attention stack; "
                             "set allow_align_with_mpu to combine them")

    @classmethod
    def named(cls, key: str) -> "VariantConfig":
        table = {
            "a": cls(use_mpu=False, use_col=False, use_ine=False),
            "b": cls(use_mpu=False, use_col=True, use_ine=False),
            "c": cls(use_mpu=True, use_col=True, use_ine=False),
            "d": cls(use_mpu=False, use_col=True, use_ine=True),
            "e": cls(use_mpu=True, use_col=True, use_ine=True),
            "kl": cls(use_mpu=False, use_col=True, use_ine=True, use_kl_align=True),
        }
        if key not in table:
            raise KeyError(f"unknown variant {key!r}; choose from {sorted(table)}")
        return table[key]


@dataclass
class ModelParams:
    encoder: EncoderParams
    sp: list[dict[int, SemanticProjectorParams]]
    re: list[RobustnessEvaluatorParams] | None
    mpu: list[list[MpuBlockParams]] | None
    head: SegHeadParams


@dataclass
class TrainOutputs:
    logits_col: Tensor
    logits_ine: Tensor | None
    align: Tensor | None
    draws: list = field(default_factory=list)


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, step, scale, purpose, ...)."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


class SegModel:
    def __init__(self, config: ModelConfig = ModelConfig(),
                 variant: VariantConfig = VariantConfig(), seed: int = 0):
        self.config = config
        self.variant = variant
        rng = np.random.default_rng(seed)
        mods = list(range(config.num_modalities))
        enc = init_encoder(rng, config.in_channels, config.channels, config.encoder_depth)
        sp = [{m: init_semantic_projector(rng, c) for m in mods} for c in config.channels]
        needs_re = variant.use_col or variant.use_ine
        re = [init_robustness_evaluator(rng, c) for c in config.channels] if needs_re else None
        mpu = None
        if variant.use_mpu:
            mpu = [init_mpu_stack(rng, c, mods, config.mpu_depth, config.heads, s)
                   for c, s in zip(config.channels, config.windows)]
        head = init_seg_head(rng, config.channels, config.num_classes, config.dec_channels)
        self.params = ModelParams(encoder=enc, sp=sp, re=re, mpu=mpu, head=head)
        self._registry = dict(named_tensors(self.params))

    # -- registry -----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self._registry

    def zero_grad(self) -> None:
        for p in self._registry.values():
            p.grad = None

    def _check_images(self, images: Mapping[int, object]) -> None:
        if not images:
            raise ValueError("at least one modality image is required")
        bad = [m for m in images if not 0 <= m < self.config.num_modalities]
        if bad:
            raise KeyError(f"modalities {bad} are not registered in this model")

    def _blocks(self, scale: int):
        return self.params.mpu[scale] if self.params.mpu is not None else None

    # -- training -----------------------------------------------------------
    def forward_train(self, images: Mapping[int, object], seed: int, step: int) -> TrainOutputs:
        """Coupled forward of both pathways on a batch ``images[m] -> [N,C,H,W]``."""
        self._check_images(images)
        v = self.variant
        pyr = encode_batch({m: as_tensor(x) for m, x in sorted(images.items())},
                           self.params.encoder)
        col, ine, align, draws = [], [], [], []
        for i in range(4):
            se = project_all({m: p[i] for m, p in pyr.items()}, self.params.sp[i])
            r = None
            if self.params.re is not None:
                re = self.params.re[i]
                r = normalize_scores({m: conv2d(f, re.w, re.b) for m, f in se.items()})
            col.append(col_forward(se, r, self._blocks(i), rng_stream(seed, step, i, 0),
                                   "train", use_col=v.use_col))
            if v.use_ine:
                f, ab = ine_forward(se, r, self._blocks(i), rng_stream(seed, step, i, 1),
                                    return_draws=True)
                ine.append(f)
                draws.append(ab)
            if v.use_kl_align and len(se) > 1:
                align.append(kl_alignment_loss(se))
        size = next(iter(images.values())).shape[-2:]
        n = col[0].shape[0]
        if ine:
            packed = [concat([a, b], axis=0) for a, b in zip(col, ine)]
            logits = decode(packed, self.params.head, size)
            logits_col, logits_ine = logits[:n], logits[n:]
        else:
            logits_col, logits_ine = decode(col, self.params.head, size), None
        align_loss = None
        if align:
            align_loss = align[0]
            for a in align[1:]:
                align_loss = align_loss + a
        return TrainOutputs(logits_col, logits_ine, align_loss, draws)

    # -- inference ----------------------------------------------------------
    def prepare(self, images: Mapping[int, object]) -> list[dict]:
        """Per-scale projected features and raw robustness scores (no grad).

        Subset inference only re-normalises scores and re-runs fusion, so
        the encoder/projector work is shared across subsets.
        """
        self._check_images(images)
        with no_grad():
            pyr = encode_batch({m: as_tensor(x) for m, x in sorted(images.items())},
                               self.params.encoder)
            cache = []
            for i in range(4):
                se = project_all({m: p[i] for m, p in pyr.items()}, self.params.sp[i])
                raw = None
                if self.params.re is not None:
                    re = self.params.re[i]
                    raw = {m: conv2d(f, re.w, re.b) for m, f in se.items()}
                cache.append({"se": se, "raw": raw})
        return cache

    def fuse(self, cache: Sequence[dict], subset: Sequence[int], out_size,
             return_features: bool = False):
        """Inference-mode logits for one modality subset of a prepared batch."""
        subset = sorted(subset)
        if not subset:
            raise ValueError("empty modality subset")
        with no_grad():
            feats, extras = [], []
            for i, level in enumerate(cache):
                missing = [m for m in subset if m not in level["se"]]
                if missing:
                    raise KeyError(f"modalities {missing} were not prepared")
                se = {m: level["se"][m] for m in subset}
                r = None
                if level["raw"] is not None and self.variant.use_col:
                    r = normalize_scores({m: level["raw"][m] for m in subset})
                f = col_forward(se, r, self._blocks(i), None, "infer", use_col=self.variant.use_col)
                feats.append(f)
                extras.append({"se": se, "r": r, "col": f})
            logits = decode(feats, self.params.head, tuple(out_size))
        return (logits, extras) if return_features else logits

    def infer(self, images: Mapping[int, object], return_features: bool = False):
        cache = self.prepare(images)
        size = next(iter(images.values())).shape[-2:]
        return self.fuse(cache, list(images), size, return_features=return_features)

    def predict(self, images: Mapping[int, object]) -> np.ndarray:
        logits = self.infer(images)
        return np.argmax(logits.data, axis=-3)
