import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from ravit.backbone import PRESETS
from ravit.blocks import (
    BlockParams,
    ClassifierParams,
    ConvBn,
    DownsampleParams,
    FfnParams,
    Init,
    MixerKind,
    SaParams,
    attention,
    classifier_head,
    downsample_forward,
    ffn_forward,
    fuse_block,
    ravit_block,
    repmsdw_forward,
    repsa_forward,
    stem_forward,
    value_dim,
)
from ravit.reparam import identity_kernel, msdw_unfused, random_kernel_set
from ravit.tensor import BnParams, conv_pw


def randn(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


def init(seed=0, **kw):
    return Init(np.random.default_rng(seed), **kw)


def zero_kernels(ks):
    for name in ("main", "branch1", "branch2a", "branch2b", "branch3a", "branch3b"):
        setattr(ks, name, np.zeros_like(getattr(ks, name)))
    return ks


@pytest.mark.parametrize("c, dv", [(320, 68), (384, 82), (512, 110), (192, 41), (64, 13)])
def test_value_dim(c, dv):
    assert value_dim(c) == dv


def test_mixer_parse():
    assert MixerKind.parse("A7") == MixerKind("A", 7) and str(MixerKind.parse("m3")) == "M3"
    with pytest.raises(ValueError):
        MixerKind.parse("X3")


class TestRepMsdw:
    def test_zero_input_gives_bn_shift(self, rng):
        ks = random_kernel_set(rng, 8, 7, perturb_bn=True)
        y = repmsdw_forward(np.zeros((1, 5, 5, 8), np.float32), ks)
        shift = ks.bn.beta - ks.bn.gamma * ks.bn.mean / np.sqrt(ks.bn.var + ks.bn.eps)
        np.testing.assert_allclose(y, np.broadcast_to(shift, y.shape), atol=1e-6)

    def test_identity_config_passes_last_chunk(self, rng):
        ks = zero_kernels(random_kernel_set(rng, 8, 3))
        ks.bn = BnParams.identity(8, eps=0.0)
        x = randn(rng, 1, 4, 4, 8)
        y = repmsdw_forward(x, ks)
        np.testing.assert_array_equal(y[..., :6], 0)
        np.testing.assert_array_equal(y[..., 6:], x[..., 6:])

    def test_fused_path(self, rng):
        ks = random_kernel_set(rng, 16, 7, perturb_bn=True)
        x = randn(rng, 1, 9, 9, 16)
        np.testing.assert_allclose(repmsdw_forward(x, ks, fused=True), repmsdw_forward(x, ks), atol=1e-4)

    def test_channel_check(self, rng):
        with pytest.raises(ValueError):
            repmsdw_forward(randn(rng, 1, 4, 4, 4), random_kernel_set(rng, 8, 3))


class TestFfn:
    def test_zero(self, rng):
        p = FfnParams.init(init(zeros=True), 4)
        np.testing.assert_array_equal(ffn_forward(randn(rng, 1, 3, 3, 4), p), 0)

    def test_single_active_path_is_gelu(self, rng):
        p = FfnParams(np.array([[1.0], [0.0], [0.0]], np.float32), np.zeros(3, np.float32),
                      np.array([[1.0, 0.0, 0.0]], np.float32), np.zeros(1, np.float32))
        x = randn(rng, 1, 4, 4, 1)
        ref = np.vectorize(oracles.gelu)(x.astype(np.float64))
        np.testing.assert_allclose(ffn_forward(x, p), ref, atol=1e-6)

    def test_per_pixel_oracle(self, rng):
        c = 6
        p = FfnParams(randn(rng, 3 * c, c) * 0.3, randn(rng, 3 * c) * 0.1, randn(rng, c, 3 * c) * 0.3, randn(rng, c))
        x = randn(rng, 1, 4, 5, c)
        hidden = np.vectorize(oracles.gelu)(oracles.pointwise(x, p.we, p.be))
        np.testing.assert_allclose(ffn_forward(x, p), oracles.pointwise(hidden, p.wr, p.br), atol=1e-5)


def token_oracle(x, ks, sa):
    """RepSA on flattened tokens, with loop softmax in float64."""
    u = msdw_unfused(x, ks).astype(np.float64)
    _, h, w, c = u.shape
    tokens = u.reshape(h * w, c)
    q, k, v = tokens @ sa.wq.T, tokens @ sa.wk.T, tokens @ sa.wv.T
    a = np.array([oracles.softmax([float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(h * w)])
                  for i in range(h * w)])
    out = np.concatenate([tokens, a @ v], axis=1) @ sa.wo.T
    return out.reshape(1, h, w, c), a


class TestRepSa:
    def test_single_token(self, rng):
        c = 8
        ks = random_kernel_set(rng, c, 3)
        sa = SaParams.init(Init(rng, std=0.3), c)
        x = randn(rng, 1, 1, 1, c)
        u = repmsdw_forward(x, ks)
        attn, weights = attention(u, sa)
        assert weights.shape == (1, 1, 1) and weights.item() == 1.0
        np.testing.assert_array_equal(attn, conv_pw(u, sa.wv))
        np.testing.assert_allclose(repsa_forward(x, ks, sa),
                                   conv_pw(np.concatenate([u, conv_pw(u, sa.wv)], axis=3), sa.wo), atol=1e-6)

    def test_zero_value_path(self, rng):
        c = 8
        ks = random_kernel_set(rng, c, 3)
        sa = SaParams.init(Init(rng, std=0.3), c)
        sa.wv = np.zeros_like(sa.wv)
        x = randn(rng, 1, 4, 4, c)
        u = repmsdw_forward(x, ks)
        attn, _ = attention(u, sa)
        assert not attn.any()
        np.testing.assert_allclose(repsa_forward(x, ks, sa), conv_pw(u, sa.wo[:, :c]), atol=1e-6)

    def test_7x7_against_token_matrix(self, rng):
        c = 64
        ks = random_kernel_set(rng, c, 7, perturb_bn=True)
        sa = SaParams.init(Init(rng, std=0.1), c)
        x = randn(rng, 1, 7, 7, c)
        ref, a_ref = token_oracle(x, ks, sa)
        _, weights = attention(repmsdw_forward(x, ks), sa)
        np.testing.assert_allclose(weights.sum(axis=2), 1.0, atol=1e-5)
        np.testing.assert_allclose(weights[0], a_ref, atol=1e-5)
        np.testing.assert_allclose(repsa_forward(x, ks, sa), ref, atol=1e-4)

    def test_shapes_checked(self, rng):
        with pytest.raises(ValueError):
            SaParams(np.zeros((16, 8)), np.zeros((16, 8)), np.zeros((2, 8)), np.zeros((8, 9)))


class TestBlock:
    def test_attention_block_zero_weights_is_identity(self, rng):
        p = BlockParams.init(init(zeros=True), 16, MixerKind("A", 7))
        x = randn(rng, 1, 7, 7, 16)
        np.testing.assert_array_equal(ravit_block(x, p), x)

    def test_conv_block_zero_weights_keeps_parameter_free_chunk(self, rng):
        # the last channel quarter is an identity branch with no weights to zero
        p = BlockParams.init(init(zeros=True), 16, MixerKind("M", 3))
        p.dw.bn = BnParams.identity(16, eps=0.0)
        x = randn(rng, 1, 5, 5, 16)
        y = ravit_block(x, p)
        np.testing.assert_array_equal(y[..., :12], x[..., :12])
        np.testing.assert_array_equal(y[..., 12:], 2 * x[..., 12:])

    def test_shape_preserved(self, rng):
        p = BlockParams.init(init(), 192, MixerKind("M", 7))
        assert ravit_block(randn(rng, 1, 14, 14, 192), p).shape == (1, 14, 14, 192)

    @pytest.mark.parametrize("mixer", ["M3", "M7", "A7", "A3"])
    def test_fused_matches_over_50_seeds(self, mixer):
        worst = 0.0
        for seed in range(50):
            p = BlockParams.init(init(seed, std=0.05, perturb_bn=True), 32, MixerKind.parse(mixer))
            x = randn(np.random.default_rng(seed + 1000), 1, 7, 7, 32)
            fused = fuse_block(p)
            worst = max(worst, float(np.abs(ravit_block(x, fused) - ravit_block(x, p)).max()))
        assert worst <= 1e-4

    def test_fuse_twice(self):
        p = fuse_block(BlockParams.init(init(), 8, MixerKind("M", 3)))
        assert p.fused
        with pytest.raises(ValueError, match="already fused"):
            fuse_block(p)

    def test_every_preset_block_preserves_shape(self, rng):
        seen = set()
        for cfg in PRESETS.values():
            seen.update(zip(cfg.dims, map(str, cfg.mixers)))
        for c, mixer in sorted(seen):
            p = BlockParams.init(init(), c, MixerKind.parse(mixer))
            x = randn(rng, 1, 4, 4, c)
            assert ravit_block(x, p).shape == x.shape
            assert ravit_block(x, p, fused=True).shape == x.shape


class TestStem:
    def test_strides(self, rng):
        convs = [ConvBn.init(init(), 3, 24), ConvBn.init(init(), 24, 48)]
        assert stem_forward(randn(rng, 1, 224, 224, 3), convs).shape == (1, 56, 56, 48)
        assert stem_forward(randn(rng, 1, 32, 32, 3), convs).shape == (1, 8, 8, 48)

    def test_composition_oracle(self, rng):
        convs = [ConvBn.init(init(1, std=0.3, perturb_bn=True), 3, 4),
                 ConvBn.init(init(2, std=0.3, perturb_bn=True), 4, 8)]
        x = randn(rng, 1, 8, 8, 3)
        y = x.astype(np.float64)
        for c in convs:
            z = oracles.bn(oracles.dense_conv(y, c.weight, stride=2, padding=1), c.bn.gamma, c.bn.beta, c.bn.mean,
                           c.bn.var, c.bn.eps)
            y = np.vectorize(oracles.gelu)(z)
        np.testing.assert_allclose(stem_forward(x, convs), y, atol=1e-5)
        np.testing.assert_allclose(stem_forward(x, [c.fuse() for c in convs]), y, atol=1e-5)

    def test_channel_check(self, rng):
        with pytest.raises(ValueError):
            stem_forward(randn(rng, 1, 8, 8, 1), [ConvBn.init(init(), 3, 4)])


class TestDownsample:
    def test_shape(self, rng):
        p = DownsampleParams.init(init(), 48, 96)
        assert downsample_forward(randn(rng, 1, 56, 56, 48), p).shape == (1, 28, 28, 96)

    def test_hand_composed_affine(self):
        # main kernel of ones, no branches, neutral norms: each output sums the 2x2 window,
        # and the last quarter adds its own centre pixel once more
        p = DownsampleParams.init(init(zeros=True), 4, 2, with_ffn=False)
        p.dw.main = np.ones_like(p.dw.main)
        p.dw.bn = BnParams.identity(4, eps=0.0)
        p.pw_w = np.ones((2, 4), np.float32)
        p.pw_norm = BnParams.identity(2, eps=0.0)
        v = 0.1
        y = downsample_forward(np.full((1, 2, 2, 4), v, np.float32), p)
        assert y.shape == (1, 1, 1, 2)
        np.testing.assert_allclose(y.ravel(), [oracles.gelu(17 * v)] * 2, atol=1e-6)

    def test_fused_matches(self, rng):
        p = DownsampleParams.init(init(3, std=0.05, perturb_bn=True), 32, 64)
        x = randn(rng, 1, 14, 14, 32)
        np.testing.assert_allclose(downsample_forward(x, p, fused=True), downsample_forward(x, p), atol=1e-4)

    def test_needs_stride_two(self, rng):
        p = DownsampleParams.init(init(), 8, 16)
        p.dw.stride = 1
        with pytest.raises(ValueError):
            downsample_forward(randn(rng, 1, 4, 4, 8), p)


class TestClassifier:
    def test_zero_weights(self, rng):
        p = ClassifierParams.init(init(zeros=True), 384)
        np.testing.assert_array_equal(classifier_head(randn(rng, 1, 7, 7, 384), p), 0)

    def test_shape(self, rng):
        assert classifier_head(randn(rng, 1, 7, 7, 384), ClassifierParams.init(init(), 384)).shape == (1, 1000)

    def test_hand_checkable(self):
        # constant input 2.0 on 2 channels; fc1 picks channel 0 (and twice channel 1); fc2 sums
        p = ClassifierParams(np.array([[1.0, 0.0], [0.0, 2.0]], np.float32), np.zeros(2, np.float32),
                             np.array([[1.0, 1.0], [1.0, -1.0]], np.float32), np.array([0.5, 0.0], np.float32))
        logits = classifier_head(np.full((1, 3, 3, 2), 2.0, np.float32), p)
        g2, g4 = oracles.gelu(2.0), oracles.gelu(4.0)
        np.testing.assert_allclose(logits, [[g2 + g4 + 0.5, g2 - g4]], atol=1e-5)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**16), hw=st.integers(1, 6), mixer=st.sampled_from(["M3", "M7", "A3", "A7"]))
def test_block_fusion_property(seed, hw, mixer):
    p = BlockParams.init(init(seed, std=0.05, perturb_bn=True), 16, MixerKind.parse(mixer))
    x = randn(np.random.default_rng(seed), 1, hw, hw, 16)
    np.testing.assert_allclose(ravit_block(x, p, fused=True), ravit_block(x, p), atol=1e-4)
