"""Shared-weight four-stage convolutional encoder.

One parameter set serves every modality; all modality images of a batch are
packed along the batch axis and pushed through the stages together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, concat, conv2d, layer_norm, relu
from .params import he_normal, ones, zeros

STRIDES = (4, 8, 16, 32)


@dataclass
class ResidualBlockParams:
    dw_w: Tensor
    dw_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    pw_w: Tensor
    pw_b: Tensor


@dataclass
class StageParams:
    embed_w: Tensor
    embed_b: Tensor
    ln_g: Tensor
    ln_b: Tensor
    blocks: list[ResidualBlockParams] = field(default_factory=list)


@dataclass
class EncoderParams:
    stages: list[StageParams]
    in_channels: int
    channels: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.stages[0].blocks)


# stage 1 embeds 4x4 patches with overlap, later stages halve resolution
_EMBED = ((7, 4, 3), (3, 2, 1), (3, 2, 1), (3, 2, 1))


def init_encoder(rng: np.random.Generator, in_channels: int = 3,
                 channels: Sequence[int] = (16, 32, 64, 128), depth: int = 2) -> EncoderParams:
    if len(channels) != 4:
        raise ValueError("encoder needs exactly four stage widths")
    stages = []
    c_prev = in_channels
    for (k, _, _), c in zip(_EMBED, channels):
        blocks = [
            ResidualBlockParams(
                dw_w=he_normal(rng, (c, 1, 3, 3), 9),
                dw_b=zeros(c),
                ln_g=ones(c),
                ln_b=zeros(c),
                pw_w=he_normal(rng, (c, c, 1, 1), c),
                pw_b=zeros(c),
            )
            for _ in range(depth)
        ]
        stages.append(StageParams(
            embed_w=he_normal(rng, (c, c_prev, k, k), c_prev * k * k),
            embed_b=zeros(c),
            ln_g=ones(c),
            ln_b=zeros(c),
            blocks=blocks,
        ))
        c_prev = c
    return EncoderParams(stages=stages, in_channels=in_channels, channels=tuple(channels))


def _block(x: Tensor, p: ResidualBlockParams) -> Tensor:
    c = x.shape[1]
    y = conv2d(x, p.dw_w, p.dw_b, padding=1, groups=c)
    y = relu(layer_norm(y, p.ln_g, p.ln_b, axis=1))
    return x + conv2d(y, p.pw_w, p.pw_b)


def _forward(x: Tensor, params: EncoderParams) -> list[Tensor]:
    levels = []
    for (k, s, pad), stage in zip(_EMBED, params.stages):
        x = conv2d(x, stage.embed_w, stage.embed_b, stride=s, padding=pad)
        x = layer_norm(x, stage.ln_g, stage.ln_b, axis=1)
        for blk in stage.blocks:
            x = _block(x, blk)
        levels.append(x)
    return levels


def _check_image(x: Tensor, params: EncoderParams) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W] image, got {x.shape}")
    c, h, w = x.shape[1:]
    if c != params.in_channels:
        raise ValueError(f"image has {c} channels, encoder expects {params.in_channels}")
    if h % 32 or w % 32:
        raise ValueError(f"spatial size {h}x{w} is not divisible by 32")


def encode(image, params: EncoderParams) -> list[Tensor]:
    """Four-level pyramid for one image ([C,H,W]) or a batch ([N,C,H,W])."""
    x = as_tensor(image)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    _check_image(x, params)
    levels = _forward(x, params)
    if single:
        levels = [lv.reshape(lv.shape[1:]) for lv in levels]
    return levels


def encode_batch(images: Mapping[int, object], params: EncoderParams) -> dict[int, list[Tensor]]:
    """Encode every modality in one packed pass.

    ``images`` maps modality key -> [N,C,H,W] (or [C,H,W]) images that share
    a shape. The result maps the same keys to per-modality pyramids.
    """
    if not images:
        raise ValueError("encode_batch needs at least one modality")
    keys = list(images)
    xs = [as_tensor(images[k]) for k in keys]
    single = xs[0].ndim == 3
    xs = [x.reshape((1,) + x.shape) if x.ndim == 3 else x for x in xs]
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ValueError("all modality images must share one shape")
    _check_image(xs[0], params)
    n = shape[0]
    packed = xs[0] if len(xs) == 1 else concat(xs, axis=0)
    levels = _forward(packed, params)
    out = {}
    for i, k in enumerate(keys):
        if len(xs) == 1:
            pyr = levels
        else:
            pyr = [lv[i * n:(i + 1) * n] for lv in levels]
        if single:
            pyr = [lv.reshape(lv.shape[1:]) for lv in pyr]
        out[k] = pyr
    return out
