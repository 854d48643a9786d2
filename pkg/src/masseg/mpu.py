"""Windowed cross-modal attention blocks.

A semantic query map attends, window by window, over key/value tokens that
are projected with modality-specific weights. Contexts are given as a map
``modality -> [N,C,H,W]``; with an optional per-pixel ``index_map`` the
context collapses to one pseudo-modality whose token at pixel p is projected
with the weights of modality ``index_map[p]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (
    Tensor, as_tensor, concat, conv2d, gather, layer_norm, matmul, relu, reshape, roll,
    softmax, stack, transpose,
)
from .params import normal, ones, zeros


@dataclass
class MpuBlockParams:
    wq: Tensor
    wk: dict[int, Tensor]
    wv: dict[int, Tensor]
    proj_w: Tensor
    proj_b: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp1_w: Tensor
    mlp1_b: Tensor
    mlp2_w: Tensor
    mlp2_b: Tensor
    heads: int
    window: int
    shift: bool

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.heads:
            raise ValueError(f"{c} channels not divisible by {self.heads} heads")
        if set(self.wk) != set(self.wv):
            raise ValueError("key and value weights must cover the same modalities")


def init_mpu_block(rng: np.random.Generator, channels: int, modalities: Sequence[int],
                   heads: int = 2, window: int = 4, shift: bool = False,
                   mlp_ratio: int = 2) -> MpuBlockParams:
    c, hid = channels, channels * mlp_ratio
    std = 1.0 / np.sqrt(c)
    return MpuBlockParams(
        wq=normal(rng, (c, c), std),
        wk={m: normal(rng, (c, c), std) for m in modalities},
        wv={m: normal(rng, (c, c), std) for m in modalities},
        proj_w=normal(rng, (c, c), std),
        proj_b=zeros(c),
        ln1_g=ones(c),
        ln1_b=zeros(c),
        ln2_g=ones(c),
        ln2_b=zeros(c),
        mlp1_w=normal(rng, (hid, c, 1, 1), np.sqrt(2.0 / c)),
        mlp1_b=zeros(hid),
        mlp2_w=normal(rng, (c, hid, 1, 1), 1.0 / np.sqrt(hid)),
        mlp2_b=zeros(c),
        heads=heads,
        window=window,
        shift=shift,
    )


def init_mpu_stack(rng: np.random.Generator, channels: int, modalities: Sequence[int],
                   depth: int = 2, heads: int = 2, window: int = 4) -> list[MpuBlockParams]:
    """``depth`` blocks alternating plain (even index) and shifted (odd) windows."""
    return [init_mpu_block(rng, channels, modalities, heads, window, shift=bool(i % 2))
            for i in range(depth)]


# ---------------------------------------------------------------------------
# window bookkeeping

def _check_window(h: int, w: int, s: int) -> None:
    if s < 1 or h % s or w % s:
        raise ValueError(f"window size {s} does not divide feature size {h}x{w}")


def window_partition(x, s: int) -> Tensor:
    """[C,H,W] -> [J, s*s, C] (or [N,C,H,W] -> [N*J, s*s, C]); windows in raster order."""
    x = as_tensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    _check_window(h, w, s)
    t = reshape(x, (n, c, h // s, s, w // s, s))
    t = transpose(t, (0, 2, 4, 3, 5, 1))
    return reshape(t, (n * (h // s) * (w // s), s * s, c))


def window_reverse(windows, h: int, w: int, n: int | None = None) -> Tensor:
    """Inverse of `window_partition`; ``n`` given -> [n,C,H,W], else [C,H,W]."""
    windows = as_tensor(windows)
    b, tokens, c = windows.shape
    s = int(round(np.sqrt(tokens)))
    if s * s != tokens:
        raise ValueError(f"{tokens} tokens per window is not a square")
    _check_window(h, w, s)
    j = (h // s) * (w // s)
    batch = 1 if n is None else n
    if b != batch * j:
        raise ValueError(f"{b} windows inconsistent with {batch} maps of {h}x{w} (window {s})")
    t = reshape(windows, (batch, h // s, w // s, s, s, c))
    t = transpose(t, (0, 5, 1, 3, 2, 4))
    out = reshape(t, (batch, c, h, w))
    return reshape(out, (c, h, w)) if n is None else out


def partition_index_map(index_map: np.ndarray, s: int) -> np.ndarray:
    """Window layout for an integer map [N,H,W] -> [N*J, s*s]."""
    n, h, w = index_map.shape
    _check_window(h, w, s)
    t = index_map.reshape(n, h // s, s, w // s, s).transpose(0, 1, 3, 2, 4)
    return t.reshape(n * (h // s) * (w // s), s * s)


def cyclic_shift(x, dy: int, dx: int) -> Tensor:
    """out[..., (r+dy) % H, (c+dx) % W] = x[..., r, c]."""
    x = as_tensor(x)
    return roll(x, (dy, dx), (x.ndim - 2, x.ndim - 1))


# ---------------------------------------------------------------------------
# attention

def _split_heads(t: Tensor, heads: int) -> Tensor:
    b, n, c = t.shape
    return transpose(reshape(t, (b, n, heads, c // heads)), (0, 2, 1, 3))


def mpu_attention(query, contexts: Mapping[int, Tensor], params: MpuBlockParams,
                  index_windows: np.ndarray | None = None, return_attn: bool = False):
    """Window multi-head attention of query tokens over modality contexts.

    ``query`` is [B,T,C]; each context is [B,T,C]. Without ``index_windows``
    the per-modality keys/values are concatenated along the token axis; with
    it ([B,T] of modality keys) position t uses modality ``index_windows[b,t]``.
    """
    if not contexts:
        raise ValueError("mpu_attention needs at least one context modality")
    missing = [m for m in contexts if m not in params.wk]
    if missing:
        raise KeyError(f"no key/value weights registered for modalities {missing}")
    q = as_tensor(query)
    b, t, c = q.shape
    keys = list(contexts)
    ks = [matmul(contexts[m], params.wk[m]) for m in keys]
    vs = [matmul(contexts[m], params.wv[m]) for m in keys]
    if index_windows is not None:
        index_windows = np.asarray(index_windows)
        lut = np.full(max(max(keys), int(index_windows.max())) + 1, -1, dtype=np.intp)
        lut[keys] = np.arange(len(keys))
        sel = lut[index_windows]
        if (sel < 0).any() or index_windows.min() < 0:
            raise KeyError("index map names a modality absent from contexts")
        sel = sel[None, :, :, None]
        k = reshape(gather(stack(ks), sel, axis=0), ks[0].shape)
        v = reshape(gather(stack(vs), sel, axis=0), vs[0].shape)
    elif len(keys) == 1:
        k, v = ks[0], vs[0]
    else:
        k, v = concat(ks, axis=1), concat(vs, axis=1)

    h = params.heads
    qh = _split_heads(matmul(q, params.wq), h)
    kh = _split_heads(k, h)
    vh = _split_heads(v, h)
    scale = 1.0 / np.sqrt(c // h)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * scale
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)  # [B,h,T,d]
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, t, c))
    out = matmul(out, params.proj_w) + params.proj_b
    return (out, attn) if return_attn else out


def mpu_block(f_se, contexts: Mapping[int, Tensor], params: MpuBlockParams,
              index_map: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual attention followed by a residual pointwise MLP.

    ``f_se`` and every context are [N,C,H,W] (or [C,H,W]); ``index_map`` is
    an optional [N,H,W] integer map of context modality keys.
    """
    x = as_tensor(f_se)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
        contexts = {m: reshape(as_tensor(v), (1,) + v.shape) for m, v in contexts.items()}
        if index_map is not None:
            index_map = np.asarray(index_map)[None]
    n, c, h, w = x.shape
    for m, v in contexts.items():
        if v.shape != x.shape:
            raise ValueError(f"context {m} has shape {v.shape}, query {x.shape}")
    s = params.window
    _check_window(h, w, s)
    shift = s // 2 if params.shift else 0

    q = layer_norm(x, params.ln1_g, params.ln1_b, axis=1)
    ctx = dict(contexts)
    idx = index_map
    if shift:
        q = cyclic_shift(q, shift, shift)
        ctx = {m: cyclic_shift(v, shift, shift) for m, v in ctx.items()}
        if idx is not None:
            idx = np.roll(idx, (shift, shift), axis=(1, 2))
    qw = window_partition(q, s)
    cw = {m: window_partition(v, s) for m, v in ctx.items()}
    iw = partition_index_map(idx, s) if idx is not None else None
    a = window_reverse(mpu_attention(qw, cw, params, iw), h, w, n)
    if shift:
        a = cyclic_shift(a, -shift, -shift)
    x = x + a

    y = layer_norm(x, params.ln2_g, params.ln2_b, axis=1)
    y = conv2d(relu(conv2d(y, params.mlp1_w, params.mlp1_b)), params.mlp2_w, params.mlp2_b)
    x = x + y
    return reshape(x, x.shape[1:]) if single else x


def mpu_stack(f_se0, contexts: Mapping[int, Tensor], blocks: Sequence[MpuBlockParams],
              index_map: np.ndarray | None = None) -> Tensor:
    """Refine the query through ``blocks`` in order; contexts stay fixed."""
    if not blocks:
        raise ValueError("mpu_stack needs at least one block")
    if any(blk.shift != bool(i % 2) for i, blk in enumerate(blocks)):
        raise ValueError("blocks must alternate plain (even index) and shifted (odd index) windows")
    x = f_se0
    for blk in blocks:
        x = mpu_block(x, contexts, blk, index_map)
    return x
