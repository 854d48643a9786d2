"""All-scale decoder: project, upsample to stride 4, concatenate, fuse, classify."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, concat, conv2d, relu, reshape, resize_bilinear
from .params import he_normal, normal, zeros


@dataclass
class SegHeadParams:
    proj_w: list[Tensor]  # per level [C_dec, C_i, 1, 1]
    proj_b: list[Tensor]
    fuse_w: Tensor  # [C_dec, 4*C_dec, 1, 1]
    fuse_b: Tensor
    cls_w: Tensor  # [K, C_dec, 1, 1]
    cls_b: Tensor

    @property
    def in_channels(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.proj_w)

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[0]


def init_seg_head(rng: np.random.Generator, channels: Sequence[int], num_classes: int,
                  dec_channels: int = 64) -> SegHeadParams:
    d = dec_channels
    return SegHeadParams(
        proj_w=[normal(rng, (d, c, 1, 1), 1.0 / np.sqrt(c)) for c in channels],
        proj_b=[zeros(d) for _ in channels],
        fuse_w=he_normal(rng, (d, len(channels) * d, 1, 1), len(channels) * d),
        fuse_b=zeros(d),
        cls_w=normal(rng, (num_classes, d, 1, 1), 1.0 / np.sqrt(d)),
        cls_b=zeros(num_classes),
    )


def decode(features: Sequence[Tensor], params: SegHeadParams, out_size: tuple[int, int]) -> Tensor:
    """Class logits [N,K,H,W] (or [K,H,W] for unbatched features)."""
    if len(features) != len(params.proj_w):
        raise ValueError(f"expected {len(params.proj_w)} feature levels, got {len(features)}")
    single = features[0].ndim == 3
    feats = [reshape(f, (1,) + f.shape) if single else f for f in features]
    base = feats[0].shape[-2:]
    for i, (f, c) in enumerate(zip(feats, params.in_channels)):
        expect = (c, base[0] >> i, base[1] >> i)
        if f.ndim != 4 or f.shape[1:] != expect:
            raise ValueError(f"level {i} has shape {f.shape}, expected [N,{expect}]")
    ups = []
    for f, w, b in zip(feats, params.proj_w, params.proj_b):
        y = conv2d(f, w, b)
        if y.shape[-2:] != base:
            y = resize_bilinear(y, base)
        ups.append(y)
    x = relu(conv2d(concat(ups, axis=1), params.fuse_w, params.fuse_b))
    x = conv2d(x, params.cls_w, params.cls_b)
    x = resize_bilinear(x, tuple(out_size))
    return reshape(x, x.shape[1:]) if single else x
