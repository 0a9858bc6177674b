import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sagate import autodiff as ad
from sagate import fusion as F
from sagate.autodiff import Tensor
from sagate.errors import ShapeMismatch, UnknownVariant

from conftest import check_grads


def make(kind="proposed", c=4, seed=0, **kw):
    cfg = F.FusionConfig(kind=kind, gate_init="random", **kw)
    with ad.default_dtype(np.float64):
        params = F.init_fusion_params(np.random.default_rng(seed), c, cfg, np.float64)
    return cfg, params


def pair(rgb, hha):
    return F.FeaturePair(Tensor(rgb), Tensor(hha))


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def oracle_rec(rgb, hha, p):
    """Straight-line numpy version of the proposed separation step."""
    c = rgb.shape[1]
    desc = np.concatenate([rgb, hha], axis=1).mean(axis=(2, 3))
    hidden = np.maximum(desc @ p["fs.w1"].data.T + p["fs.b1"].data, 0)
    w = sigmoid(hidden @ p["fs.w2"].data.T + p["fs.b2"].data)
    w_rgb, w_hha = w[:, :c, None, None], w[:, c:, None, None]
    return rgb + hha * w_hha, hha + rgb * w_rgb, w_rgb, w_hha


def oracle_merge(rgb, hha, rgb_rec, hha_rec, p):
    stacked = np.concatenate([rgb_rec, hha_rec], axis=1)
    g_r = np.einsum("oc,nchw->nohw", p["fa.rgb.weight"].data[:, :, 0, 0], stacked)
    g_h = np.einsum("oc,nchw->nohw", p["fa.hha.weight"].data[:, :, 0, 0], stacked)
    a_r = np.exp(g_r) / (np.exp(g_r) + np.exp(g_h))
    return rgb * a_r + hha * (1 - a_r)


def test_zero_hha_leaves_rgb_untouched():
    cfg, p = make()
    rgb = np.random.default_rng(1).standard_normal((2, 4, 3, 3))
    sep = F.feature_separation(pair(rgb, np.zeros_like(rgb)), p, cfg)
    np.testing.assert_array_equal(sep.hha_filtered.data, 0.0)
    np.testing.assert_array_equal(sep.rgb_rec.data, rgb)


def test_zero_mlp_gives_half_weights():
    cfg, p = make()
    for k in ("fs.w1", "fs.b1", "fs.w2", "fs.b2"):
        p[k] = Tensor(np.zeros_like(p[k].data))
    rng = np.random.default_rng(2)
    rgb, hha = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    sep = F.feature_separation(pair(rgb, hha), p, cfg)
    np.testing.assert_array_equal(sep.weights.w_rgb.data, 0.5)
    np.testing.assert_allclose(sep.hha_filtered.data, 0.5 * hha)


def test_separation_and_merge_match_straight_line_oracle():
    cfg, p = make(seed=3)
    rng = np.random.default_rng(3)
    rgb, hha = rng.standard_normal((1, 4, 5, 5)), rng.standard_normal((1, 4, 5, 5))
    out = F.sa_gate(pair(rgb, hha), p, cfg)
    rgb_rec, hha_rec, _, _ = oracle_rec(rgb, hha, p)
    np.testing.assert_allclose(out.separation.rgb_rec.data, rgb_rec, atol=1e-12)
    np.testing.assert_allclose(out.separation.hha_rec.data, hha_rec, atol=1e-12)
    np.testing.assert_allclose(out.merged.data, oracle_merge(rgb, hha, rgb_rec, hha_rec, p), atol=1e-12)


def test_identical_inputs_are_a_fixed_point():
    cfg, p = make(seed=4)
    x = np.random.default_rng(4).standard_normal((2, 4, 4, 4)) * 5
    np.testing.assert_allclose(F.sa_gate(pair(x, x), p, cfg).merged.data, x, atol=1e-12)


def test_tied_logits_average_inputs():
    cfg, p = make(seed=5)
    p["fa.hha.weight"] = Tensor(p["fa.rgb.weight"].data.copy())
    rng = np.random.default_rng(5)
    rgb, hha = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    out = F.sa_gate(pair(rgb, hha), p, cfg)
    np.testing.assert_allclose(out.merged.data, (rgb + hha) / 2, atol=1e-12)


@pytest.mark.parametrize("kind", ["proposed", "concat", "self-global", "cross-global", "product"])
def test_merge_is_pointwise_convex(kind):
    cfg, p = make(kind, seed=6)
    rng = np.random.default_rng(6)
    for _ in range(100):
        rgb, hha = rng.uniform(-10, 10, (1, 4, 3, 3)), rng.uniform(-10, 10, (1, 4, 3, 3))
        m = F.fuse(pair(rgb, hha), p, cfg).merged.data
        assert np.all(m >= np.minimum(rgb, hha) - 1e-12)
        assert np.all(m <= np.maximum(rgb, hha) + 1e-12)


def test_zero_hha_gate_still_normalised():
    cfg, p = make(seed=7)
    rgb = np.random.default_rng(7).standard_normal((1, 4, 4, 4))
    gate = F.sa_gate(pair(rgb, np.zeros_like(rgb)), p, cfg).gate
    np.testing.assert_allclose(gate.a_rgb.data + gate.a_hha.data, 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 2), st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_gate_normalisation_property(n, c, hw, seed):
    cfg, p = make(c=c, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    rgb, hha = rng.uniform(-10, 10, (n, c, hw, hw)), rng.uniform(-10, 10, (n, c, hw, hw))
    gate = F.sa_gate(pair(rgb, hha), p, cfg).gate
    assert np.abs(gate.a_rgb.data + gate.a_hha.data - 1).max() <= 1e-6


def test_self_global_ignores_other_modality():
    cfg, p = make("self-global", seed=8)
    rng = np.random.default_rng(8)
    rgb = rng.standard_normal((1, 4, 3, 3))
    w1 = F.channel_weights(pair(rgb, rng.standard_normal((1, 4, 3, 3))), p, cfg)[0].w_rgb.data
    w2 = F.channel_weights(pair(rgb, rng.standard_normal((1, 4, 3, 3))), p, cfg)[0].w_rgb.data
    np.testing.assert_array_equal(w1, w2)


def test_cross_global_adds_to_own_modality():
    cfg, p = make("cross-global", seed=9)
    rng = np.random.default_rng(9)
    rgb, hha = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    sep = F.feature_separation(pair(rgb, hha), p, cfg)
    np.testing.assert_allclose(sep.rgb_rec.data, rgb + sep.rgb_filtered.data)
    np.testing.assert_allclose(sep.hha_rec.data, hha + sep.hha_filtered.data)


def test_product_with_half_weights_by_hand():
    cfg, p = make("product", c=1)
    for k in ("fs.w1", "fs.b1", "fs.w2", "fs.b2"):
        p[k] = Tensor(np.zeros_like(p[k].data))
    rgb = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    hha = np.array([[[[2.0, -1.0], [0.5, 0.0]]]])
    sep = F.feature_separation(pair(rgb, hha), p, cfg)
    np.testing.assert_allclose(sep.rgb_rec.data, [[[[1.0, -1.0], [0.75, 0.0]]]])
    np.testing.assert_allclose(sep.hha_rec.data, sep.rgb_rec.data)


def test_addition_on_zero_hha_matches_oracle():
    cfg, p = make("addition", seed=10)
    x = np.random.default_rng(10).standard_normal((1, 4, 3, 3))
    out = F.fuse(pair(x, np.zeros_like(x)), p, cfg)
    _, _, w_rgb, _ = oracle_rec(x, np.zeros_like(x), p)
    np.testing.assert_allclose(out.merged.data, x + x * w_rgb, atol=1e-12)
    assert out.gate is None
    # saturated channel weights give the 2X structure
    p["fs.b2"] = Tensor(np.full_like(p["fs.b2"].data, 40.0))
    np.testing.assert_allclose(F.fuse(pair(x, np.zeros_like(x)), p, cfg).merged.data, 2 * x, atol=1e-12)


def test_conv_variant_is_merge_conv_of_recalibrated():
    cfg, p = make("conv", seed=11)
    rng = np.random.default_rng(11)
    rgb, hha = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    out = F.fuse(pair(rgb, hha), p, cfg)
    rgb_rec, hha_rec, _, _ = oracle_rec(rgb, hha, p)
    stacked = np.concatenate([rgb_rec, hha_rec], axis=1)
    ref = np.einsum("oc,nchw->nohw", p["fa.merge.weight"].data[:, :, 0, 0], stacked) + p["fa.merge.bias"].data[None, :, None, None]
    np.testing.assert_allclose(out.merged.data, ref, atol=1e-12)


@pytest.mark.parametrize("kind", F.FUSION_KINDS)
def test_swapping_modalities_with_swapped_params(kind):
    cfg, p = make(kind, seed=12)
    rng = np.random.default_rng(12)
    rgb, hha = rng.standard_normal((1, 4, 3, 3)), rng.standard_normal((1, 4, 3, 3))
    m1 = F.fuse(pair(rgb, hha), p, cfg).merged.data
    m2 = F.fuse(pair(hha, rgb), F.swap_modality_params(p, cfg), cfg).merged.data
    np.testing.assert_allclose(m1, m2, atol=1e-12)


@pytest.mark.parametrize("kind", F.FUSION_KINDS)
def test_variant_gradients(kind):
    cfg, p = make(kind, c=2, seed=13)
    names = list(p)
    rng = np.random.default_rng(13)
    rgb, hha = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))
    w = Tensor(rng.standard_normal((1, 2, 3, 3)))

    def loss(r, h, *vals):
        params = dict(zip(names, vals))
        return (F.fuse(F.FeaturePair(r, h), params, cfg).merged * w).sum()

    arrays = [rgb, hha] + [p[k].data for k in names]
    # shift MLP hidden biases off the ReLU kink so central differences are valid
    for i, k in enumerate(names):
        if k.endswith("b1"):
            arrays[i + 2] = arrays[i + 2] + 1.0
    check_grads(loss, arrays, 1e-4)


def test_errors():
    with pytest.raises(ShapeMismatch):
        pair(np.ones((1, 2, 3, 3)), np.ones((1, 3, 3, 3)))
    with pytest.raises(UnknownVariant):
        F.FusionConfig(kind="attention")
    with pytest.raises(ValueError):
        F.FusionConfig(gate_init="ones")
