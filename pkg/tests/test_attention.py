import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from assocdetr.attention import (ChannelAttention, ChannelAttentionConfig, ReceptiveFieldWeights, RFCBAMConv,
                                 RFCBAMConvConfig, SpatialAttention)
from assocdetr.autodiff import ops
from assocdetr.autodiff.gradcheck import check_gradients
from assocdetr.autodiff.module import count_params
from assocdetr.autodiff.tensor import ShapeError, Tensor
from oracles import conv_oracle, sigmoid, softmax_rows


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=grad)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


# --- channel attention ---------------------------------------------------------

def test_channel_zero_mlp_gives_half(rng):
    ca = ChannelAttention(ChannelAttentionConfig(6, 2))
    zero_params(ca)
    assert np.all(ca(T(rng.standard_normal((2, 6, 3, 3)))).data == 0.5)


def test_channel_zero_input_gives_half():
    ca = ChannelAttention(ChannelAttentionConfig(6, 2), np.random.default_rng(4))
    out = ca(T(np.zeros((1, 6, 3, 3)))).data
    assert out.shape == (1, 6, 1, 1) and np.all(out == 0.5)


def test_channel_explicit_oracle():
    x = np.random.default_rng(0).standard_normal((1, 4, 3, 3))
    ca = ChannelAttention(ChannelAttentionConfig(4, 2), np.random.default_rng(0))
    for p in ca.parameters():  # nonzero biases so they are exercised
        if p.ndim == 1:
            p.data[...] = np.random.default_rng(9).standard_normal(p.shape)
    w1, b1, w2, b2 = ca.fc1.weight.data, ca.fc1.bias.data, ca.fc2.weight.data, ca.fc2.bias.data

    def mlp(vec):
        hidden = [max(0.0, sum(w1[r, c] * vec[c] for c in range(4)) + b1[r]) for r in range(2)]
        return [sum(w2[c, r] * hidden[r] for r in range(2)) + b2[c] for c in range(4)]

    avg = [x[0, c].sum() / 9 for c in range(4)]
    mx = [x[0, c].max() for c in range(4)]
    oracle = [sigmoid(a + m) for a, m in zip(mlp(avg), mlp(mx))]
    np.testing.assert_allclose(ca(T(x)).data.reshape(-1), oracle, rtol=0, atol=1e-12)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        ChannelAttention(ChannelAttentionConfig(4))(T(np.ones((1, 3, 2, 2))))


def test_reduced_width_floor_one():
    assert ChannelAttentionConfig(4, 8).reduced == 1
    assert ChannelAttentionConfig(256, 8).reduced == 32


# --- spatial attention ---------------------------------------------------------

def test_spatial_constant_zero_conv():
    sa = SpatialAttention()
    zero_params(sa)
    out = sa(T(np.full((1, 3, 5, 4), 2.0))).data
    assert out.shape == (1, 1, 5, 4) and np.all(out == 0.5)


def test_spatial_composed_oracle():
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 5))
    sa = SpatialAttention(rng=np.random.default_rng(1))
    desc = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    pre = conv_oracle(desc, sa.conv.weight.data, padding=3)
    assert np.array_equal(sa(T(x)).data, ops.sigmoid(T(pre)).data)


# --- receptive-field weights -------------------------------------------------------

def test_rf_zero_generator_uniform():
    rf = ReceptiveFieldWeights(2, 3)
    zero_params(rf)
    out = rf(T(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))).data
    assert out.shape == (1, 9, 4, 4) and np.all(out == 1 / 9)


def test_rf_unfold_softmax_oracle():
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4))
    rf = ReceptiveFieldWeights(2, 3, np.random.default_rng(1))
    rf.bias.data[...] = np.random.default_rng(2).standard_normal(9)
    w, b = rf.weight.data[:, :, 0, 0], rf.bias.data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oracle = np.zeros((1, 9, 4, 4))
    for y in range(4):
        for xx in range(4):
            logits = [sum(w[s, c] * xp[0, c, y + s // 3, xx + s % 3] for c in range(2)) + b[s] for s in range(9)]
            oracle[0, :, y, xx] = softmax_rows(logits)
    np.testing.assert_allclose(rf(T(x)).data, oracle, rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]))
def test_rf_weights_simplex(seed, k, stride):
    rng = np.random.default_rng(seed)
    rf = ReceptiveFieldWeights(3, k, rng)
    out = rf(T(rng.standard_normal((1, 3, 6, 6)) * 3), stride).data
    assert np.all(out > 0) and np.all(out < 1) if k > 1 else np.all(out == 1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_rf_even_kernel_rejected():
    with pytest.raises(ValueError):
        RFCBAMConvConfig(4, 4, kernel=2)


# --- RFCBAMConv ------------------------------------------------------------------------

@pytest.mark.parametrize("k,stride,hw", [(3, 1, 5), (3, 2, 5), (5, 2, 8), (1, 1, 4), (3, 2, 6)])
def test_rfcbam_shape_formula(k, stride, hw):
    m = RFCBAMConv(RFCBAMConvConfig(4, 6, k, stride, 2))
    out = m(T(np.random.default_rng(0).standard_normal((2, 4, hw, hw))))
    expect = (hw + 2 * (k // 2) - k) // stride + 1
    assert out.shape == (2, 6, expect, expect)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride", [1, 2])
def test_rfcbam_uniform_reduces_to_scaled_conv(seed, stride):
    rng = np.random.default_rng(seed)
    m = RFCBAMConv(RFCBAMConvConfig(3, 4, 3, stride, use_channel=False), rng)
    zero_params(m.rf)
    x = rng.standard_normal((2, 3, 6, 7))
    expect = conv_oracle(x, m.aggregate.weight.data / 9.0, stride=stride, padding=1)
    np.testing.assert_allclose(m.prenorm(T(x)).data, expect, rtol=0, atol=1e-10)


def test_rfcbam_param_count_closed_form():
    # rf generator (9 slots x 64 + 9), channel MLP 64->8->64 with biases, aggregate 64x64x3x3, BN affine
    oracle = (9 * 64 + 9) + (64 * 8 + 8 + 8 * 64 + 64) + 64 * 64 * 9 + 2 * 64
    cfg = RFCBAMConvConfig(64, 64, 3, 1, 8)
    assert oracle == 38673
    assert count_params(RFCBAMConv(cfg)) == oracle
    assert RFCBAMConv.expected_param_count(cfg) == oracle


def test_rfcbam_param_count_with_spatial():
    cfg = RFCBAMConvConfig(16, 8, 3, 2, 4, use_spatial=True)
    assert count_params(RFCBAMConv(cfg)) == RFCBAMConv.expected_param_count(cfg)


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("spatial", [False, True])
def test_rfcbam_translation_equivariance(stride, spatial):
    rng = np.random.default_rng(stride)
    m = RFCBAMConv(RFCBAMConvConfig(3, 4, 3, stride, 2, use_spatial=spatial), rng)
    x = rng.standard_normal((1, 3, 16, 16))
    # circular shift keeps the global pooled descriptors of channel attention unchanged
    shifted = np.roll(x, stride, axis=3)
    a, b = m.prenorm(T(x)).data, m.prenorm(T(shifted)).data
    margin = 4
    np.testing.assert_allclose(b[..., margin:-margin, margin + 1:-margin], a[..., margin:-margin, margin:-margin - 1],
                               rtol=0, atol=1e-10)


def test_rfcbam_gradients():
    rng = np.random.default_rng(0)
    m = RFCBAMConv(RFCBAMConvConfig(4, 3, 3, 2, 2, use_spatial=True), rng)
    x = T(rng.standard_normal((2, 4, 6, 6)), True)
    params = m.parameters()
    w = rng.standard_normal((2, 3, 3, 3))
    assert check_gradients(lambda: ops.sum(ops.mul(m(x), T(w))), [x] + params) < 1e-4


@given(st.integers(0, 2**31 - 1))
def test_attention_weights_open_interval(seed):
    rng = np.random.default_rng(seed)
    x = T(rng.standard_normal((1, 4, 5, 5)) * 4)
    ca = ChannelAttention(ChannelAttentionConfig(4, 2), rng)(x).data
    sa = SpatialAttention(rng=rng)(x).data
    for v in (ca, sa):
        assert np.all(v > 0) and np.all(v < 1)
