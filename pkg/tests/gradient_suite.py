"""Finite-difference gradient cases shared by test_gradients.py and the acceptance suite.

Each case maps a seed to a GradReport (relative error per checked tensor).
Only the whole-model case skips coordinates whose stencil straddles a relu
kink; every other case is strict.
"""

from __future__ import annotations

import numpy as np

from masseg.autodiff import (
    Tensor, concat, conv2d, cross_entropy, exp, gather, layer_norm, log, log_softmax, matmul,
    mean, reduce_sum, relu, reshape, resize_bilinear, roll, softmax, softmin, stack, transpose,
)
from masseg.autodiff.gradcheck import gradient_report
from masseg.head import decode, init_seg_head
from masseg.model import ModelConfig, SegModel, VariantConfig
from masseg.mpu import init_mpu_block, mpu_block
from masseg.pathways import init_semantic_projector, semantic_project
from masseg.training import mass_loss

SEEDS = range(20)
TOL = 1e-4


def _t(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = low + np.abs(data)
    return Tensor(data, requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.05):
    """Standard normal values pushed at least ``margin`` away from relu's kink."""
    d = rng.standard_normal(shape)
    return Tensor(d + np.sign(d) * margin, requires_grad=True)


def _generic(rng, tensors):
    """Jitter parameters so no relu input sits exactly on the kink.

    Zero-initialised biases make pre-activations exactly 0 wherever a whole
    receptive field was zeroed upstream; finite differences straddle the
    kink there.
    """
    for t in tensors:
        t.data += 0.1 * rng.standard_normal(t.shape)


def _proj(rng, out_shape):
    """Fixed random projection turning any tensor into a scalar loss."""
    return rng.standard_normal(out_shape)


def _scalar(y, r):
    return reduce_sum(y * r)


# ---------------------------------------------------------------------------
# primitives

def case_add_mul_div(seed):
    rng = np.random.default_rng(seed)
    a, b, c = _t(rng, 3, 4), _t(rng, 4), _t(rng, 3, 1, low=0.5)
    r = _proj(rng, (3, 4))
    return gradient_report(lambda: _scalar((a * b + a - b) / c, r), {"a": a, "b": b, "c": c})


def case_relu_exp_log(seed):
    rng = np.random.default_rng(seed)
    x = _away_from_zero(rng, 2, 3, 4)
    p = _t(rng, 2, 3, 4, low=0.3)
    r = _proj(rng, (2, 3, 4))
    return gradient_report(lambda: _scalar(relu(x) + exp(x * 0.5) + log(p), r), {"x": x, "p": p})


def case_matmul(seed):
    rng = np.random.default_rng(seed)
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    r = _proj(rng, (2, 3, 5))
    return gradient_report(lambda: _scalar(matmul(a, b), r), {"a": a, "b": b})


def case_reductions(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 4, 5)
    r1, r2 = _proj(rng, (3, 5)), _proj(rng, (1, 4, 1))
    return gradient_report(
        lambda: _scalar(reduce_sum(x, axis=1), r1) + _scalar(mean(x, axis=(0, 2), keepdims=True), r2)
        + mean(x),
        {"x": x})


def case_shape_ops(seed):
    rng = np.random.default_rng(seed)
    x, y = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
    idx = rng.integers(0, 3, size=5)
    r1 = _proj(rng, (4, 6, 2))
    r2 = _proj(rng, (2, 5, 4))
    r3 = _proj(rng, (2, 2, 3, 4))

    def f():
        a = transpose(concat([x, roll(y, (1, 2), (1, 2))], axis=1), (2, 1, 0))
        b = reshape(x, (2, 12))[:, 3:]
        c = x[:, idx]
        return _scalar(a, r1) + reduce_sum(b * b) + _scalar(c, r2) + _scalar(stack([x, y]), r3)

    return gradient_report(f, {"x": x, "y": y})


def case_gather(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 2, 4, 4)
    idx = rng.integers(0, 3, size=(1, 2, 1, 4, 4))
    idx2 = rng.integers(0, 3, size=(1, 2, 1, 1, 1))
    r = _proj(rng, (1, 2, 4, 4, 4))

    def f():
        src = reshape(x, (3, 2, 1, 4, 4)) * np.ones((1, 1, 4, 1, 1))
        return _scalar(gather(src, idx, 0), r) + _scalar(gather(src, idx2, 0), r)

    return gradient_report(f, {"x": x})


def case_softmax_family(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 5)
    r = _proj(rng, (3, 5))
    return gradient_report(
        lambda: _scalar(softmax(x, axis=1) + log_softmax(x, axis=0) + softmin(x, axis=1), r),
        {"x": x})


def case_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, g, b = _t(rng, 2, 4, 3, 3), _t(rng, 4), _t(rng, 4)
    r = _proj(rng, (2, 4, 3, 3))
    return gradient_report(lambda: _scalar(layer_norm(x, g, b, axis=1), r), {"x": x, "g": g, "b": b})


def _conv_case(seed, cin, cout, k, stride, pad, groups, size=6):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, cin, size, size)
    w = _t(rng, cout, cin // groups, k, k)
    bias = _t(rng, cout)
    ho = (size + 2 * pad - k) // stride + 1
    r = _proj(rng, (2, cout, ho, ho))
    return gradient_report(lambda: _scalar(conv2d(x, w, bias, stride, pad, groups), r),
                           {"x": x, "w": w, "b": bias})


def case_conv_pointwise(seed):
    return _conv_case(seed, 3, 4, 1, 1, 0, 1)


def case_conv_depthwise(seed):
    k = (3, 7, 11)[seed % 3]
    return _conv_case(seed, 3, 3, k, 1, k // 2, 3, size=4 + seed % 5)


def case_conv_strided(seed):
    return _conv_case(seed, 2, 3, (3, 7)[seed % 2], (2, 4)[seed % 2], (1, 3)[seed % 2], 1, size=8)


def case_conv_grouped(seed):
    return _conv_case(seed, 4, 6, 3, 1, 1, 2)


def case_bilinear(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 2, 3)
    r2, r4 = _proj(rng, (2, 3, 4, 6)), _proj(rng, (2, 3, 8, 12))
    return gradient_report(lambda: _scalar(resize_bilinear(x, (4, 6)), r2)
                           + _scalar(resize_bilinear(x, (8, 12)), r4), {"x": x})


def case_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return gradient_report(lambda: cross_entropy(x, labels), {"x": x})


# ---------------------------------------------------------------------------
# composite blocks

def case_semantic_projector(seed):
    rng = np.random.default_rng(seed)
    p = init_semantic_projector(rng, 3)
    _generic(rng, p.dw_b + [p.pw_b])
    x = _t(rng, 1, 3, 6, 6)
    r = _proj(rng, (1, 3, 6, 6))
    params = {"x": x, "dw11": p.dw_w[0], "dw7": p.dw_w[1], "dw3": p.dw_w[2], "pw": p.pw_w,
              "b3": p.dw_b[2]}
    return gradient_report(lambda: _scalar(semantic_project(x, p), r), params)


def case_mpu_block(seed):
    rng = np.random.default_rng(seed)
    blk = init_mpu_block(rng, 4, [0, 1, 2], heads=2, window=2, shift=bool(seed % 2))
    q = _t(rng, 1, 4, 4, 4)
    ctx = {m: _t(rng, 1, 4, 4, 4) for m in range(3)}
    index_map = rng.integers(0, 3, size=(1, 4, 4)) if seed % 4 >= 2 else None
    r = _proj(rng, (1, 4, 4, 4))
    params = {"q": q, "c1": ctx[1], "wq": blk.wq, "wk0": blk.wk[0], "wv2": blk.wv[2],
              "proj": blk.proj_w, "ln1_g": blk.ln1_g, "mlp1": blk.mlp1_w, "mlp2": blk.mlp2_w}
    return gradient_report(lambda: _scalar(mpu_block(q, ctx, blk, index_map), r), params)


def case_seg_head(seed):
    rng = np.random.default_rng(seed)
    chans = (4, 6, 6, 8)
    head = init_seg_head(rng, chans, 3, dec_channels=4)
    feats = [_t(rng, 1, c, 8 >> i, 8 >> i) for i, c in enumerate(chans)]
    r = _proj(rng, (1, 3, 32, 32))
    params = {"f0": feats[0], "f3": feats[3], "proj1": head.proj_w[1], "fuse": head.fuse_w,
              "fuse_b": head.fuse_b, "cls": head.cls_w}
    return gradient_report(lambda: _scalar(decode(feats, head, (32, 32)), r), params)


_TINY = ModelConfig(channels=(4, 8, 8, 8), windows=(4, 2, 2, 1), dec_channels=8,
                    encoder_depth=1, mpu_depth=2)


def case_full_loss(seed):
    """Whole coupled objective (both pathways) w.r.t. a sample of model tensors."""
    rng = np.random.default_rng(seed)
    model = SegModel(_TINY, VariantConfig.named("e"), seed=seed)
    images = {m: rng.random((2, 3, 32, 32)) for m in range(4)}
    labels = rng.integers(0, 5, size=(2, 32, 32))
    reg = model.parameters()
    _generic(rng, reg.values())
    names = sorted(reg)
    picks = [n for n in names if n.startswith(("encoder.stages.0.embed_w", "re.1.w", "head.fuse_w"))]
    picks += list(rng.choice([n for n in names if n not in picks], size=6, replace=False))
    params = {n: reg[n] for n in picks}

    def f():
        out = model.forward_train(images, seed, 0)
        return mass_loss(out.logits_col, out.logits_ine, labels)

    return gradient_report(f, params, max_entries=4, seed=seed, skip_kinks=True)


PRIMITIVES = {
    "add_mul_div": case_add_mul_div,
    "relu_exp_log": case_relu_exp_log,
    "matmul": case_matmul,
    "reductions": case_reductions,
    "shape_ops": case_shape_ops,
    "gather": case_gather,
    "softmax_family": case_softmax_family,
    "layer_norm": case_layer_norm,
    "conv_pointwise": case_conv_pointwise,
    "conv_depthwise": case_conv_depthwise,
    "conv_strided": case_conv_strided,
    "conv_grouped": case_conv_grouped,
    "bilinear": case_bilinear,
    "cross_entropy": case_cross_entropy,
}

COMPOSITES = {
    "semantic_projector": case_semantic_projector,
    "mpu_block": case_mpu_block,
    "seg_head": case_seg_head,
    "full_loss": case_full_loss,
}

ALL_CASES = {**PRIMITIVES, **COMPOSITES}


def run_suite(seeds=SEEDS):
    """Yield (case, seed, report) for every case and seed."""
    for name, fn in ALL_CASES.items():
        for seed in seeds:
            yield name, seed, fn(seed)
