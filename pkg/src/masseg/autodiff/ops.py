"""Differentiable primitives.

Each function takes `Tensor` (or array-like) inputs, computes the forward
value with numpy and registers a vector-Jacobian product on the result.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "matmul", "relu", "exp", "log",
    "sum", "mean", "reshape", "transpose", "getitem", "concat", "stack", "roll",
    "softmax", "log_softmax", "softmin", "layer_norm", "conv2d",
    "resize_bilinear", "upsample_bilinear", "bilinear_matrix", "gather",
    "cross_entropy",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise ValueError(f"{op}: input contains non-finite values")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), vjp, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), vjp, "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return make_result(out, (x,), vjp, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_result(out, (x,), vjp, "log")


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects tensors with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), vjp, "matmul")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(out, dtype=DTYPE), (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(np.asarray(out, dtype=DTYPE), (x,), vjp, "mean")


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def vjp(g):
        return (g.reshape(src),)

    return make_result(x.data.reshape(shape), (x,), vjp, "reshape")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return make_result(x.data.transpose(axes), (x,), vjp, "transpose")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    advanced = _is_advanced(index)

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return make_result(np.array(x.data[index], dtype=DTYPE), (x,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    axis = _check_axis(axis, ts[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("stack of an empty sequence")
    out = np.stack([t.data for t in ts], axis=axis)
    axis = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_result(out, ts, vjp, "stack")


def roll(x, shift: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Toroidal shift: out[..., (i + shift) % n, ...] = x[..., i, ...]."""
    x = as_tensor(x)
    shift, axes = tuple(shift), tuple(axes)
    back = tuple(-s for s in shift)

    def vjp(g):
        return (np.roll(g, back, axis=axes),)

    return make_result(np.roll(x.data, shift, axis=axes), (x,), vjp, "roll")


def gather(x, index: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with a scatter-add backward.

    ``index`` must broadcast against ``x`` on every axis except ``axis``.
    """
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    index = np.asarray(index)
    if index.ndim != x.ndim:
        raise ValueError("gather index must have the same rank as the source")
    if index.size and (index.min() < 0 or index.max() >= x.shape[axis]):
        raise IndexError("gather index out of range")
    out_shape = list(np.broadcast_shapes(
        tuple(1 if i == axis else n for i, n in enumerate(x.shape)),
        tuple(1 if i == axis else n for i, n in enumerate(index.shape)),
    ))
    out_shape[axis] = index.shape[axis]
    idx = np.broadcast_to(index, out_shape)
    src = np.broadcast_to(x.data, tuple(
        x.shape[i] if i == axis else out_shape[i] for i in range(x.ndim)))
    shape = x.shape

    def vjp(g):
        gx = np.zeros(src.shape, dtype=DTYPE)
        if idx.shape[axis] == 1:
            np.put_along_axis(gx, idx, g, axis=axis)
        else:
            full = list(np.indices(idx.shape, sparse=True))
            full[axis] = idx
            np.add.at(gx, tuple(full), g)
        return (_unbroadcast(gx, shape),)

    return make_result(np.take_along_axis(src, idx, axis=axis), (x,), vjp, "gather")


# ---------------------------------------------------------------------------
# normalisation

def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    _require_finite(x.data, "softmax")
    y = _softmax_data(x.data, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    _require_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), vjp, "log_softmax")


def softmin(x, axis: int = -1) -> Tensor:
    """softmax(-x): larger inputs receive smaller weights."""
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("softmin of an empty input")
    return softmax(mul(x, -1.0), axis=axis)


def layer_norm(x, gamma, beta, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Normalise over one axis (channels) with a per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm affine must have shape ({n},)")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gb = gamma.data.reshape(bshape)
    xc = x.data - x.data.mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    red = tuple(i for i in range(x.ndim) if i != axis)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gb
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(xhat * gb + beta.data.reshape(bshape), (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# convolution

def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, (int, np.integer)) else (int(v[0]), int(v[1]))


def _pad(x: np.ndarray, pads: tuple[int, int, int, int]) -> np.ndarray:
    t, b, l, r = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (t, b), (l, r)))


def _crop_taps(k: int, pad_lo: int, pad_hi: int, n: int) -> tuple[int, int, int, int]:
    """Drop kernel taps that only ever see zero padding (stride 1).

    Returns (first tap, last tap + 1, new low pad, new high pad).
    """
    n_out = n + pad_lo + pad_hi - k + 1
    lo = max(0, pad_lo - n_out + 1)
    hi = min(k - 1, pad_lo + n - 1)
    new_lo = pad_lo - lo
    kk = hi - lo + 1
    new_hi = n_out - n - new_lo + kk - 1
    return lo, hi + 1, new_lo, new_hi


def _depthwise_valid(xp: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valid stride-1 depthwise correlation. xp [N,C,Hp,Wp], w [C,kh,kw].

    One small product per (sample, channel) so results never depend on the
    batch size.
    """
    n, c = xp.shape[:2]
    kh, kw = w.shape[1:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2:4]
    cols = win.reshape(n, c, ho * wo, kh * kw)
    out = np.matmul(cols, w.reshape(c, kh * kw, 1)).reshape(n, c, ho, wo)
    return out, cols


def _conv_depthwise(x, w, pads):
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    t, b, l, r = pads
    r0, r1, t, b = _crop_taps(kh, t, b, h)
    c0, c1, l, r = _crop_taps(kw, l, r, wd)
    wc = np.ascontiguousarray(w[:, 0, r0:r1, c0:c1])
    kh2, kw2 = wc.shape[1:]
    out, cols = _depthwise_valid(_pad(x, (t, b, l, r)), wc)

    def grad_x(g):
        gp = _pad(g, (kh2 - 1 - t, kh2 - 1 - b, kw2 - 1 - l, kw2 - 1 - r))
        gx, _ = _depthwise_valid(gp, np.ascontiguousarray(wc[:, ::-1, ::-1]))
        return gx

    def grad_w(g):
        gt = g.reshape(n, c, 1, -1)
        gwc = np.matmul(gt, cols).sum(axis=0).reshape(c, kh2, kw2)
        gw = np.zeros_like(w)
        gw[:, 0, r0:r1, c0:c1] = gwc
        return gw

    return out, grad_x, grad_w


def _conv_pointwise(x, w, groups):
    n, c, h, wd = x.shape
    co = w.shape[0]
    cig, cog = c // groups, co // groups
    w2 = w.reshape(co, cig)
    xf = x.reshape(n, c, h * wd)
    # stacked per-sample products keep each sample's result batch-independent
    if groups == 1:
        out = np.matmul(w2, xf).reshape(n, co, h, wd)
    else:
        out = np.concatenate([
            np.matmul(w2[g * cog:(g + 1) * cog], xf[:, g * cig:(g + 1) * cig])
            for g in range(groups)], axis=1).reshape(n, co, h, wd)

    def grad_x(gout):
        if groups == 1:
            return np.einsum("oc,nohw->nchw", w2, gout, optimize=True)
        return np.concatenate([
            np.einsum("oc,nohw->nchw", w2[g * cog:(g + 1) * cog], gout[:, g * cog:(g + 1) * cog],
                      optimize=True)
            for g in range(groups)], axis=1)

    def grad_w(gout):
        if groups == 1:
            gw = np.einsum("nohw,nchw->oc", gout, x, optimize=True)
        else:
            gw = np.concatenate([
                np.einsum("nohw,nchw->oc", gout[:, g * cog:(g + 1) * cog],
                          x[:, g * cig:(g + 1) * cig], optimize=True)
                for g in range(groups)], axis=0)
        return gw.reshape(w.shape)

    return out, grad_x, grad_w


def _conv_general(x, w, stride, pads, groups):
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    cog = co // groups
    sh, sw = stride
    xp = _pad(x, pads)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2:4]
    outs = []
    for g in range(groups):
        cols = win[:, g * cig:(g + 1) * cig].transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, -1)
        wg = w[g * cog:(g + 1) * cog].reshape(cog, -1)
        outs.append(np.matmul(cols, wg.T).transpose(0, 2, 1).reshape(n, cog, ho, wo))
    out = np.concatenate(outs, axis=1) if groups > 1 else outs[0]

    def grad_x(gout):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for g in range(groups):
            dcols = np.tensordot(gout[:, g * cog:(g + 1) * cog], w[g * cog:(g + 1) * cog],
                                 axes=([1], [0]))  # [N,Ho,Wo,cig,kh,kw]
            for i in range(kh):
                for j in range(kw):
                    gxp[:, g * cig:(g + 1) * cig, i:i + sh * ho:sh, j:j + sw * wo:sw] += (
                        dcols[..., i, j].transpose(0, 3, 1, 2))
        t, b, l, r = pads
        return gxp[:, :, t:t + h, l:l + wd]

    def grad_w(gout):
        parts = [
            np.tensordot(gout[:, g * cog:(g + 1) * cog], win[:, g * cig:(g + 1) * cig],
                         axes=([0, 2, 3], [0, 2, 3]))
            for g in range(groups)]
        return np.concatenate(parts, axis=0) if groups > 1 else parts[0]

    return out, grad_x, grad_w


def conv2d(x, w, bias=None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``x`` is [C_in,H,W] or [N,C_in,H,W]; ``w`` is [C_out, C_in/groups, kh, kw].
    ``padding`` is an int, a (ph, pw) pair or a (top, bottom, left, right) tuple.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(bias) if bias is not None else None
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W] input and 4-d weights, got {x.shape}, {w.shape}")
    n, cin, h, wd = xd.shape
    cout, cig, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cig != cin // groups:
        raise ValueError(f"weight expects {cig * groups} input channels, input has {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")
    stride = _pair(stride)
    if isinstance(padding, (tuple, list)) and len(padding) == 4:
        pads = tuple(int(p) for p in padding)
    else:
        ph, pw = _pair(padding)
        pads = (ph, ph, pw, pw)
    if min(stride) < 1 or min(pads) < 0:
        raise ValueError("stride must be positive and padding non-negative")
    if h + pads[0] + pads[1] < kh or wd + pads[2] + pads[3] < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pads}")

    if kh == kw == 1 and stride == (1, 1) and not any(pads):
        out, gx_fn, gw_fn = _conv_pointwise(xd, w.data, groups)
    elif (groups == cin == cout and stride == (1, 1)
          and max(pads[:2]) < kh and max(pads[2:]) < kw):
        out, gx_fn, gw_fn = _conv_depthwise(xd, w.data, pads)
    else:
        out, gx_fn, gw_fn = _conv_general(xd, w.data, stride, pads, groups)
    if b is not None:
        out = out + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = gx_fn(g4) if x.requires_grad else None
        if gx is not None and squeeze:
            gx = gx[0]
        gw = gw_fn(g4) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(np.ascontiguousarray(out), parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# resampling

@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix [n_out, n_in] with half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m.setflags(write=False)
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes to ``size``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("resize_bilinear needs at least 2 dimensions")
    h, w = x.shape[-2:]
    ho, wo = size
    uh, uw = bilinear_matrix(h, ho), bilinear_matrix(w, wo)

    def vjp(g):
        return (uh.T @ g @ uw,)

    return make_result(uh @ x.data @ uw.T, (x,), vjp, "resize_bilinear")


def upsample_bilinear(x, factor: int) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    return resize_bilinear(x, (h * factor, w * factor))


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits, labels, ignore_id: int = 255) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    ``logits`` is [K,H,W] or [N,K,H,W]; ``labels`` holds integer class ids
    of shape [H,W] / [N,H,W].
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    squeeze = logits.ndim == labels.ndim + 1 and logits.ndim == 3
    x = logits.data[None] if squeeze else logits.data
    lab = labels[None] if squeeze else labels
    if x.ndim != lab.ndim + 1 or x.shape[:1] + x.shape[2:] != lab.shape:
        raise ValueError(f"logits {logits.shape} do not match labels {labels.shape}")
    _require_finite(x, "cross_entropy")
    k = x.shape[1]
    valid = lab != ignore_id
    if not valid.any():
        raise ValueError("cross_entropy: every pixel is ignored")
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ValueError(f"cross_entropy: label outside [0, {k}) and not ignore_id")
    safe = np.where(valid, lab, 0).astype(np.intp)
    z = x - x.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    loss = -(picked * valid).sum() / count

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[:, None], np.take_along_axis(p, safe[:, None], axis=1) - 1.0,
                          axis=1)
        gx = p * (valid[:, None] * (float(g) / count))
        return (gx[0] if squeeze else gx,)

    return make_result(np.asarray(loss, dtype=DTYPE), (logits,), vjp, "cross_entropy")
