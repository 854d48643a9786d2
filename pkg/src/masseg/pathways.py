"""Collaborative and individual-enhancement fusion pathways.

Per scale, every modality feature is first mapped by its own semantic
projector. The collaborative pathway builds a robustness-weighted query and
attends over a per-pixel reassembled context (training) or over all
available modalities (inference). The individual pathway samples a query
modality and a context modality, biased toward low-robustness modalities.

All maps are keyed by modality index; features are [N,C,H,W] tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    Tensor, conv2d, gather, log, log_softmax, mean, mul, reduce_sum, relu, reshape, softmax,
    stack,
)
from .autodiff.ops import _softmax_data
from .mpu import MpuBlockParams, mpu_stack
from .params import normal, zeros

SP_KERNELS = (11, 7, 3)


@dataclass
class SemanticProjectorParams:
    dw_w: list[Tensor]  # [C,1,k,k] for k in SP_KERNELS
    dw_b: list[Tensor]
    pw_w: Tensor  # [C,C,1,1]
    pw_b: Tensor


@dataclass
class RobustnessEvaluatorParams:
    w: Tensor  # [1,C,1,1]
    b: Tensor  # [1]


def init_semantic_projector(rng: np.random.Generator, channels: int) -> SemanticProjectorParams:
    c = channels
    dw_w = []
    for k in SP_KERNELS:
        # near-identity start: centre tap plus small noise
        w = rng.standard_normal((c, 1, k, k)) * (0.5 / k)
        w[:, 0, k // 2, k // 2] += 1.0
        dw_w.append(Tensor(w, requires_grad=True))
    return SemanticProjectorParams(
        dw_w=dw_w,
        dw_b=[zeros(c) for _ in SP_KERNELS],
        pw_w=normal(rng, (c, c, 1, 1), np.sqrt(1.0 / c)),
        pw_b=zeros(c),
    )


def init_robustness_evaluator(rng: np.random.Generator, channels: int) -> RobustnessEvaluatorParams:
    return RobustnessEvaluatorParams(w=normal(rng, (1, channels, 1, 1), 0.1 / np.sqrt(channels)),
                                     b=zeros(1))


def semantic_project(f: Tensor, params: SemanticProjectorParams) -> Tensor:
    """Depthwise 11x11 -> 7x7 -> 3x3 (relu after each), then pointwise."""
    c = f.shape[-3]
    x = f
    for w, b in zip(params.dw_w, params.dw_b):
        k = w.shape[-1]
        x = relu(conv2d(x, w, b, padding=k // 2, groups=c))
    return conv2d(x, params.pw_w, params.pw_b)


def project_all(features: Mapping[int, Tensor],
                params: Mapping[int, SemanticProjectorParams]) -> dict[int, Tensor]:
    missing = [m for m in features if m not in params]
    if missing:
        raise KeyError(f"no semantic projector registered for modalities {missing}")
    return {m: semantic_project(f, params[m]) for m, f in features.items()}


def _check_nonempty(features: Mapping) -> list[int]:
    if not features:
        raise ValueError("at least one modality is required")
    return list(features)


def robustness(features: Mapping[int, Tensor], re: RobustnessEvaluatorParams) -> dict[int, Tensor]:
    """Per-pixel robustness maps [N,1,H,W], softmax-normalised across modalities."""
    keys = _check_nonempty(features)
    raw = [conv2d(features[m], re.w, re.b) for m in keys]
    return normalize_scores(dict(zip(keys, raw)))


def normalize_scores(raw: Mapping[int, Tensor]) -> dict[int, Tensor]:
    keys = _check_nonempty(raw)
    probs = softmax(stack([raw[m] for m in keys]), axis=0)
    return {m: probs[i] for i, m in enumerate(keys)}


def weighted_init(features: Mapping[int, Tensor], r: Mapping[int, Tensor]) -> Tensor:
    """Robustness-weighted sum of modality features."""
    keys = _check_nonempty(features)
    if set(keys) != set(r):
        raise ValueError(f"feature modalities {sorted(keys)} != robustness modalities {sorted(r)}")
    out = mul(features[keys[0]], r[keys[0]])
    for m in keys[1:]:
        out = out + mul(features[m], r[m])
    return out


def additive_fusion(features: Mapping[int, Tensor]) -> Tensor:
    """Plain mean of the available modality features."""
    keys = _check_nonempty(features)
    if len(keys) == 1:
        return features[keys[0]]
    return mean(stack([features[m] for m in keys]), axis=0)


def reassemble(features: Mapping[int, Tensor], rng: np.random.Generator):
    """Per-pixel uniform choice of source modality.

    Returns (f_re [N,C,H,W], index map [N,H,W] of modality keys).
    """
    keys = _check_nonempty(features)
    f0 = features[keys[0]]
    n, _, h, w = f0.shape
    choice = rng.integers(0, len(keys), size=(n, h, w))
    index_map = np.asarray(keys)[choice]
    if len(keys) == 1:
        return f0, index_map
    f_re = reshape(gather(stack([features[m] for m in keys]), choice[None, :, None], axis=0),
                   f0.shape)
    return f_re, index_map


@dataclass(frozen=True)
class SamplingDistribution:
    modalities: tuple[int, ...]
    probs: np.ndarray  # [N, M] rows sum to 1


def softmin_probs(r: Mapping[int, Tensor]) -> SamplingDistribution:
    """SoftMin over spatially averaged robustness, one row per sample."""
    keys = _check_nonempty(r)
    rbar = np.stack([r[m].data.reshape(r[m].shape[0], -1).mean(axis=1) for m in keys], axis=1)
    return SamplingDistribution(tuple(keys), _softmax_data(-rbar, axis=1))


def sample_modalities(dist: SamplingDistribution, rng: np.random.Generator) -> np.ndarray:
    """One draw per sample (row) by inverse CDF; returns modality keys [N]."""
    cdf = np.cumsum(dist.probs, axis=1)
    u = rng.random(dist.probs.shape[0])
    pos = (u[:, None] >= cdf[:, :-1]).sum(axis=1)
    return np.asarray(dist.modalities)[pos]


def draw_ine_pair(dist: SamplingDistribution, rng: np.random.Generator):
    """Independent draws of query-source and context-source modalities."""
    return sample_modalities(dist, rng), sample_modalities(dist, rng)


def _select_per_sample(features: Mapping[int, Tensor], picks: np.ndarray) -> Tensor:
    keys = list(features)
    if len(keys) == 1:
        return features[keys[0]]
    pos = np.asarray([keys.index(int(p)) for p in picks])
    f0 = features[keys[0]]
    sel = pos.reshape(1, -1, 1, 1, 1)
    return reshape(gather(stack([features[m] for m in keys]), sel, axis=0), f0.shape)


def col_forward(se: Mapping[int, Tensor], r: Mapping[int, Tensor] | None,
                blocks: Sequence[MpuBlockParams] | None, rng: np.random.Generator | None,
                mode: str = "train", use_col: bool = True) -> Tensor:
    """Collaborative fused feature for one scale.

    ``use_col`` selects the robustness-weighted query (else a plain mean);
    ``blocks`` None skips the attention stack. In train mode the context is a
    reassembled pseudo-modality, in infer mode every available modality.
    """
    _check_nonempty(se)
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    query = weighted_init(se, r) if use_col else additive_fusion(se)
    if not blocks:
        return query
    if mode == "train" and use_col:
        if rng is None:
            raise ValueError("train mode needs an explicit rng for reassembly")
        _, index_map = reassemble(se, rng)
        return mpu_stack(query, se, blocks, index_map=index_map)
    return mpu_stack(query, se, blocks)


def ine_forward(se: Mapping[int, Tensor], r: Mapping[int, Tensor],
                blocks: Sequence[MpuBlockParams] | None, rng: np.random.Generator,
                mode: str = "train", return_draws: bool = False):
    """Individual-enhancement feature for one scale (training only)."""
    if mode != "train":
        raise RuntimeError("the individual-enhancement pathway runs only during training")
    _check_nonempty(se)
    dist = softmin_probs(r)
    a, b = draw_ine_pair(dist, rng)
    query = _select_per_sample(se, a)
    if blocks:
        n, _, h, w = query.shape
        index_map = np.broadcast_to(b[:, None, None], (n, h, w))
        out = mpu_stack(query, se, blocks, index_map=index_map)
    else:
        out = query
    return (out, (a, b)) if return_draws else out


def kl_alignment_loss(features: Mapping[int, Tensor]) -> Tensor:
    """Mean KL(p_m || p_avg) of per-pixel channel distributions.

    p_m is the channel softmax of modality m's feature and p_avg the
    modality average of those distributions.
    """
    keys = _check_nonempty(features)
    if len(keys) < 2:
        raise ValueError("alignment loss needs at least two modalities")
    logp = stack([log_softmax(features[m], axis=-3) for m in keys])  # [M,...,C,H,W]
    p = stack([softmax(features[m], axis=-3) for m in keys])
    logq = log(mean(p, axis=0, keepdims=True))
    kl = reduce_sum(mul(p, logp - logq), axis=-3)
    return mean(kl)
