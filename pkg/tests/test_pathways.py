import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from masseg.autodiff import Tensor, reduce_sum
from masseg.mpu import init_mpu_stack
from masseg.pathways import (
    SamplingDistribution, additive_fusion, col_forward, draw_ine_pair, ine_forward,
    init_robustness_evaluator, init_semantic_projector, kl_alignment_loss, normalize_scores,
    project_all, reassemble, robustness, sample_modalities, semantic_project, softmin_probs,
    weighted_init,
)


def _feats(rng, mods, shape=(2, 4, 4, 4)):
    return {m: Tensor(rng.standard_normal(shape)) for m in mods}


def _identity_blocks(rng, c, mods, window=2, depth=2):
    blocks = init_mpu_stack(rng, c, mods, depth=depth, heads=2, window=window)
    for b in blocks:
        for t in (b.proj_w, b.proj_b, b.mlp2_w, b.mlp2_b):
            t.data[:] = 0
    return blocks


# -- semantic projector ------------------------------------------------------------

def _identity_sp(c):
    sp = init_semantic_projector(np.random.default_rng(0), c)
    for w in sp.dw_w:
        k = w.shape[-1]
        w.data[:] = 0
        w.data[:, 0, k // 2, k // 2] = 1
    sp.pw_w.data[:] = np.eye(c)[:, :, None, None]
    return sp


def test_sp_identity_on_non_negative_input():
    # relu sits between the layers, so identity holds for inputs >= 0
    x = np.abs(np.random.default_rng(1).standard_normal((3, 8, 8)))
    np.testing.assert_array_equal(semantic_project(Tensor(x), _identity_sp(3)).data, x)


def test_sp_zero_pointwise():
    sp = init_semantic_projector(np.random.default_rng(2), 3)
    sp.pw_w.data[:] = 0
    assert not semantic_project(Tensor(np.ones((3, 8, 8))), sp).data.any()


def _naive_conv_same(x, w):
    """Direct loop convolution with zero 'same' padding; x [H,W], w [k,k]."""
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, p)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = np.sum(xp[i:i + k, j:j + k] * w)
    return out


def test_sp_against_naive_convolution():
    rng = np.random.default_rng(3)
    sp = init_semantic_projector(rng, 1)
    for b in sp.dw_b:
        b.data[:] = rng.standard_normal(1)
    sp.pw_b.data[:] = rng.standard_normal(1)
    x = rng.standard_normal((1, 8, 8))
    y = x[0]
    for w, b in zip(sp.dw_w, sp.dw_b):
        y = np.maximum(_naive_conv_same(y, w.data[0, 0]) + b.data[0], 0)
    y = sp.pw_w.data[0, 0, 0, 0] * y + sp.pw_b.data[0]
    got = semantic_project(Tensor(x), sp).data[0]
    assert np.max(np.abs(got - y)) <= 1e-10
    # scipy cross-check of the first layer
    first = correlate2d(np.pad(x[0], 5), sp.dw_w[0].data[0, 0], mode="valid")
    np.testing.assert_allclose(first, _naive_conv_same(x[0], sp.dw_w[0].data[0, 0]), atol=1e-12)


def test_project_all_rejects_unregistered():
    with pytest.raises(KeyError):
        project_all({3: Tensor(np.zeros((1, 2, 4, 4)))}, {0: _identity_sp(2)})


# -- robustness / weighted init -------------------------------------------------------

def test_robustness_single_modality_is_one():
    rng = np.random.default_rng(4)
    re = init_robustness_evaluator(rng, 4)
    r = robustness(_feats(rng, [2]), re)
    assert np.all(r[2].data == 1.0)


def test_robustness_symmetric_for_identical_features():
    rng = np.random.default_rng(5)
    re = init_robustness_evaluator(rng, 4)
    f = Tensor(rng.standard_normal((1, 4, 4, 4)))
    r = robustness({0: f, 1: Tensor(f.data.copy())}, re)
    np.testing.assert_allclose(r[0].data, 0.5, atol=1e-15)
    np.testing.assert_allclose(r[1].data, 0.5, atol=1e-15)


def test_normalize_scores_log3():
    raw = {0: Tensor(np.zeros((1, 1, 1, 1))), 1: Tensor(np.full((1, 1, 1, 1), math.log(3)))}
    r = normalize_scores(raw)
    assert r[0].data.item() == pytest.approx(0.25, abs=1e-15)
    assert r[1].data.item() == pytest.approx(0.75, abs=1e-15)


def test_robustness_is_a_simplex():
    rng = np.random.default_rng(6)
    re = init_robustness_evaluator(rng, 4)
    re.w.data *= 30
    r = robustness(_feats(rng, range(4)), re)
    total = sum(v.data for v in r.values())
    assert np.max(np.abs(total - 1)) < 1e-6
    assert all(((v.data >= 0) & (v.data <= 1)).all() for v in r.values())


def test_weighted_init_against_direct_summation():
    rng = np.random.default_rng(7)
    feats = _feats(rng, range(4))
    raw = {m: Tensor(rng.standard_normal((2, 1, 4, 4))) for m in range(4)}
    r = normalize_scores(raw)
    got = weighted_init(feats, r).data
    ref = np.zeros_like(got)
    for idx in np.ndindex(*got.shape):
        n, c, i, j = idx
        ref[idx] = sum(r[m].data[n, 0, i, j] * feats[m].data[idx] for m in range(4))
    assert np.max(np.abs(got - ref)) <= 1e-12
    lo = np.min([f.data for f in feats.values()], axis=0)
    hi = np.max([f.data for f in feats.values()], axis=0)
    assert np.all(got >= lo - 1e-12) and np.all(got <= hi + 1e-12)


def test_weighted_init_selection_and_mean():
    rng = np.random.default_rng(8)
    feats = _feats(rng, range(4))
    one_hot = {m: Tensor(np.full((2, 1, 4, 4), float(m == 2))) for m in range(4)}
    np.testing.assert_array_equal(weighted_init(feats, one_hot).data, feats[2].data)
    equal = {m: Tensor(np.full((2, 1, 4, 4), 0.25)) for m in range(4)}
    np.testing.assert_allclose(weighted_init(feats, equal).data,
                               np.mean([f.data for f in feats.values()], axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        weighted_init(feats, {0: one_hot[0]})


def test_additive_fusion():
    rng = np.random.default_rng(9)
    feats = _feats(rng, range(3))
    np.testing.assert_allclose(additive_fusion(feats).data,
                               (feats[0].data + feats[1].data + feats[2].data) / 3, atol=1e-15)
    assert additive_fusion({1: feats[1]}) is feats[1]
    f = feats[0]
    np.testing.assert_allclose(additive_fusion({0: f, 1: Tensor(f.data.copy())}).data, f.data)
    with pytest.raises(ValueError):
        additive_fusion({})


# -- reassembly -------------------------------------------------------------------------

def test_reassemble_takes_all_channels_from_one_source():
    rng = np.random.default_rng(10)
    feats = _feats(rng, [0, 2, 3])
    f_re, idx = reassemble(feats, np.random.default_rng(0))
    assert set(np.unique(idx)) <= {0, 2, 3}
    for n, i, j in np.ndindex(*idx.shape):
        np.testing.assert_array_equal(f_re.data[n, :, i, j], feats[int(idx[n, i, j])].data[n, :, i, j])


def test_reassemble_degenerate_cases():
    rng = np.random.default_rng(11)
    f = Tensor(rng.standard_normal((1, 4, 4, 4)))
    out, idx = reassemble({1: f}, rng)
    assert out is f and np.all(idx == 1)
    same, _ = reassemble({0: f, 1: Tensor(f.data.copy()), 2: Tensor(f.data.copy())}, rng)
    np.testing.assert_array_equal(same.data, f.data)
    with pytest.raises(ValueError):
        reassemble({}, rng)


def test_reassemble_deterministic_by_seed():
    feats = _feats(np.random.default_rng(12), range(4))
    a = reassemble(feats, np.random.default_rng(5))[1]
    b = reassemble(feats, np.random.default_rng(5))[1]
    np.testing.assert_array_equal(a, b)


# -- sampling ---------------------------------------------------------------------------

def test_softmin_probs_examples():
    r = {0: Tensor(np.zeros((1, 1, 2, 2))), 1: Tensor(np.full((1, 1, 2, 2), math.log(3)))}
    d = softmin_probs(r)
    np.testing.assert_allclose(d.probs, [[0.75, 0.25]], atol=1e-15)
    eq = softmin_probs({m: Tensor(np.full((3, 1, 2, 2), 0.2)) for m in range(4)})
    np.testing.assert_allclose(eq.probs, 0.25, atol=1e-15)
    assert softmin_probs({3: Tensor(np.ones((2, 1, 2, 2)))}).probs.tolist() == [[1.0], [1.0]]


def test_sample_modalities_returns_keys_and_is_deterministic():
    d = SamplingDistribution((1, 3), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert sample_modalities(d, np.random.default_rng(0)).tolist() == [3, 1]
    d2 = SamplingDistribution((0, 1, 2), np.full((5, 3), 1 / 3))
    a = draw_ine_pair(d2, np.random.default_rng(9))
    b = draw_ine_pair(d2, np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


# -- pathways ---------------------------------------------------------------------------

def _r_uniform(mods, shape=(2, 1, 4, 4)):
    return normalize_scores({m: Tensor(np.zeros(shape)) for m in mods})


def test_col_single_modality_infer():
    rng = np.random.default_rng(13)
    blocks = init_mpu_stack(rng, 4, range(4), depth=2, heads=2, window=2)
    feats = _feats(rng, [2])
    out = col_forward(feats, _r_uniform([2]), blocks, None, "infer")
    assert out.shape == (2, 4, 4, 4)


def test_col_identity_mpu_returns_weighted_init():
    rng = np.random.default_rng(14)
    blocks = _identity_blocks(rng, 4, range(3))
    feats = _feats(rng, range(3))
    r = normalize_scores({m: Tensor(rng.standard_normal((2, 1, 4, 4))) for m in range(3)})
    out = col_forward(feats, r, blocks, np.random.default_rng(0), "train")
    np.testing.assert_allclose(out.data, weighted_init(feats, r).data, atol=1e-14)


def test_col_train_equals_infer_for_identical_modalities():
    rng = np.random.default_rng(15)
    blocks = init_mpu_stack(rng, 4, range(3), depth=2, heads=2, window=2)
    for b in blocks:  # shared K/V weights make the modalities truly interchangeable
        for m in (1, 2):
            b.wk[m].data[:] = b.wk[0].data
            b.wv[m].data[:] = b.wv[0].data
    f = rng.standard_normal((2, 4, 4, 4))
    feats = {m: Tensor(f.copy()) for m in range(3)}
    r = _r_uniform(range(3))
    train = col_forward(feats, r, blocks, np.random.default_rng(1), "train").data
    infer = col_forward(feats, r, blocks, None, "infer").data
    assert np.max(np.abs(train - infer)) <= 1e-9


def test_col_mode_errors():
    rng = np.random.default_rng(16)
    blocks = init_mpu_stack(rng, 4, range(2), depth=2, heads=2, window=2)
    feats = _feats(rng, range(2))
    with pytest.raises(ValueError):
        col_forward(feats, _r_uniform(range(2)), blocks, None, "train")
    with pytest.raises(ValueError):
        col_forward(feats, _r_uniform(range(2)), blocks, None, "eval")


def test_ine_single_modality_and_identity():
    rng = np.random.default_rng(17)
    blocks = _identity_blocks(rng, 4, range(4))
    feats = _feats(rng, [1])
    out, (a, b) = ine_forward(feats, _r_uniform([1]), blocks, rng, return_draws=True)
    assert a.tolist() == [1, 1] and b.tolist() == [1, 1]
    np.testing.assert_allclose(out.data, feats[1].data, atol=1e-14)


def test_ine_query_is_complete_sampled_modality():
    rng = np.random.default_rng(18)
    blocks = _identity_blocks(rng, 4, range(4))
    feats = _feats(rng, range(4))
    out, (a, _) = ine_forward(feats, _r_uniform(range(4)), blocks, np.random.default_rng(3),
                              return_draws=True)
    for n, m in enumerate(a):
        np.testing.assert_allclose(out.data[n], feats[int(m)].data[n], atol=1e-14)


def test_ine_is_train_only():
    rng = np.random.default_rng(19)
    with pytest.raises(RuntimeError):
        ine_forward(_feats(rng, [0]), _r_uniform([0]), None, rng, mode="infer")


def test_subset_closure_shapes():
    rng = np.random.default_rng(20)
    blocks = init_mpu_stack(rng, 4, range(4), depth=2, heads=2, window=2)
    re = init_robustness_evaluator(rng, 4)
    feats = _feats(rng, range(4))
    from masseg.modality import all_subsets
    for sub in all_subsets(4):
        sf = {m: feats[m] for m in sub}
        r = robustness(sf, re)
        assert col_forward(sf, r, blocks, None, "infer").shape == (2, 4, 4, 4)
        assert col_forward(sf, r, blocks, np.random.default_rng(0), "train").shape == (2, 4, 4, 4)
        assert ine_forward(sf, r, blocks, np.random.default_rng(0)).shape == (2, 4, 4, 4)


# -- KL alignment -----------------------------------------------------------------------

def test_kl_zero_for_identical_and_non_negative():
    rng = np.random.default_rng(21)
    f = rng.standard_normal((1, 3, 2, 2))
    assert kl_alignment_loss({0: Tensor(f), 1: Tensor(f.copy())}).item() == pytest.approx(0, abs=1e-15)
    assert kl_alignment_loss(_feats(rng, range(3))).item() >= 0
    with pytest.raises(ValueError):
        kl_alignment_loss({0: Tensor(f)})


def test_kl_hand_case():
    f0 = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    f1 = np.array([0.0, 2.0]).reshape(1, 2, 1, 1)
    p0 = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    p1 = np.exp([0.0, 2.0]) / np.exp([0.0, 2.0]).sum()
    q = (p0 + p1) / 2
    expected = (np.sum(p0 * np.log(p0 / q)) + np.sum(p1 * np.log(p1 / q))) / 2
    got = kl_alignment_loss({0: Tensor(f0), 1: Tensor(f1)}).item()
    assert got == pytest.approx(expected, abs=1e-14)


def test_kl_has_gradient():
    rng = np.random.default_rng(22)
    f = Tensor(rng.standard_normal((1, 3, 2, 2)), requires_grad=True)
    kl_alignment_loss({0: f, 1: Tensor(rng.standard_normal((1, 3, 2, 2)))}).backward()
    assert np.linalg.norm(f.grad) > 0
    reduce_sum(f).backward()


def test_sampler_unbiased_at_scale():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    n = 400_000
    a, b = draw_ine_pair(SamplingDistribution((0, 1, 2, 3), np.tile(p, (n, 1))),
                         np.random.default_rng(12345))
    for x in (a, b):
        freq = np.bincount(x, minlength=4) / n
        assert np.all(np.abs(freq - p) < 5 * np.sqrt(p * (1 - p) / n))
