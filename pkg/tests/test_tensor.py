import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transnext import oracles
from transnext.tensor import (DomainError, LinearParams, ShapeError, adaptive_avg_pool,
                              adaptive_bins, conv2d, conv_output_size, depthwise_conv3x3, gelu,
                              inverse_softplus, layernorm, linear, matmul, sentinel, softmax,
                              softplus, trunc_normal)


def test_matmul_identity_and_hand_values():
    assert np.array_equal(matmul(np.eye(2), np.array([[3., 4.], [5., 6.]])), [[3, 4], [5, 6]])
    assert matmul(np.array([[1., 2.]]), np.array([[3.], [4.]]))[0, 0] == 11


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(a, b), oracles.matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_linear_shape_checks():
    p = LinearParams(np.ones((4, 3)), np.zeros(4))
    assert linear(np.ones((2, 3)), p).shape == (2, 4)
    with pytest.raises(ShapeError):
        linear(np.ones((2, 5)), p)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3)
    out = softmax(np.array([5.0, 123.0]), np.array([False, True]))
    assert out[0] == 1.0 and out[1] == 0.0
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), e / e.sum(), rtol=1e-15)


def test_softmax_fully_masked_row():
    with pytest.raises(DomainError):
        softmax(np.zeros((2, 3)), np.array([[False, True, True], [True, True, True]]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one_and_masked_zero(values, seed):
    x = np.array(values)
    mask = np.random.default_rng(seed).random(x.size) < 0.4
    mask[np.random.default_rng(seed).integers(x.size)] = False
    out = softmax(x, mask)
    assert np.all(out[mask] == 0.0)
    assert np.all(out[~mask] >= 0.0)
    assert abs(out.sum() - 1.0) <= 1e-6


def test_sentinel_is_most_negative_finite():
    assert sentinel(np.float32) == np.finfo(np.float32).min
    assert sentinel(np.float64) == np.finfo(np.float64).min


def test_layernorm_examples(rng):
    assert np.all(layernorm(np.full((2, 4), 3.0), np.ones(4), np.zeros(4)) == 0.0)
    np.testing.assert_allclose(layernorm(np.array([1.0, 3.0]), np.ones(2), np.zeros(2), eps=0.0),
                               [-1.0, 1.0])
    assert np.all(layernorm(rng.standard_normal((3, 5)), np.zeros(5), np.full(5, 5.0)) == 5.0)
    y = layernorm(rng.standard_normal((10, 16)) * 3 + 2, np.ones(16), np.zeros(16))
    assert np.abs(y.mean(-1)).max() < 1e-5 and np.abs(y.var(-1) - 1).max() < 1e-5


def test_gelu_examples():
    assert gelu(np.array(0.0)) == 0.0
    assert abs(float(gelu(np.array(1.0))) - 0.841345) < 1e-6
    assert abs(float(gelu(np.array(10.0))) - 10.0) < 1e-12
    assert abs(float(gelu(np.array(-10.0)))) < 1e-12
    assert gelu(np.ones(3, np.float32)).dtype == np.float32
    assert abs(float(gelu(np.array(0.3))) - 0.15 * (1 + math.erf(0.3 / math.sqrt(2)))) < 1e-15


def test_softplus_inverse_roundtrip():
    for y in (0.1, 1.0, 1 / 0.24, 30.0):
        assert abs(float(softplus(inverse_softplus(y))) - y) < 1e-12


def test_adaptive_bins_cover_and_overlap():
    assert adaptive_bins(5, 2) == [(0, 3), (2, 5)]
    assert adaptive_bins(4, 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]


def test_adaptive_avg_pool_examples():
    assert np.all(adaptive_avg_pool(np.full((1, 4, 4), 2.0), 2, 2) == 2.0)
    x = np.random.default_rng(0).standard_normal((2, 3, 3))
    np.testing.assert_allclose(adaptive_avg_pool(x, 3, 3), x, atol=1e-15)
    ramp = np.arange(25.0).reshape(1, 5, 5)
    expect = np.array([[ramp[0, r0:r1, c0:c1].mean() for c0, c1 in adaptive_bins(5, 2)]
                       for r0, r1 in adaptive_bins(5, 2)])
    np.testing.assert_allclose(adaptive_avg_pool(ramp, 2, 2)[0], expect, atol=1e-12)
    with pytest.raises(ShapeError):
        adaptive_avg_pool(ramp, 0, 2)


def _dw_loops(x, f, b):
    c, h, w = x.shape
    out = np.zeros_like(x)
    for cc in range(c):
        for i in range(h):
            for j in range(w):
                s = b[cc]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            s += f[cc, di, dj] * x[cc, ii, jj]
                out[cc, i, j] = s
    return out


def test_depthwise_examples(rng):
    delta = np.zeros((2, 3, 3))
    delta[:, 1, 1] = 1
    x = rng.standard_normal((2, 5, 6))
    assert np.array_equal(depthwise_conv3x3(x, delta), x)
    ones = depthwise_conv3x3(np.ones((1, 4, 4)), np.ones((1, 3, 3)))
    assert ones[0, 1, 1] == 9.0 and ones[0, 0, 0] == 4.0
    f, b = rng.standard_normal((2, 3, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(depthwise_conv3x3(x, f, b), _dw_loops(x, f, b), atol=1e-12)
    with pytest.raises(ShapeError):
        depthwise_conv3x3(x, np.ones((2, 5, 5)))


def _conv_loops(x, f, b, stride, pad):
    cout, cin, k, _ = f.shape
    _, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= ii < h and 0 <= jj < w:
                                s += f[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = s
    return out


@pytest.mark.parametrize("k,stride,pad", [(7, 4, 3), (3, 2, 1), (1, 1, 0), (3, 1, 1)])
def test_conv2d_matches_loops(rng, k, stride, pad):
    x = rng.standard_normal((3, 9, 11))
    f, b = rng.standard_normal((4, 3, k, k)), rng.standard_normal(4)
    np.testing.assert_allclose(conv2d(x, f, b, stride, pad), _conv_loops(x, f, b, stride, pad),
                               atol=1e-12)


def test_conv2d_pointwise_and_stem_shape(rng):
    x = rng.standard_normal((3, 4, 5))
    f = rng.standard_normal((6, 3, 1, 1))
    np.testing.assert_allclose(conv2d(x, f), np.einsum("oc,chw->ohw", f[:, :, 0, 0], x), atol=1e-13)
    assert conv2d(np.zeros((3, 224, 224), np.float32),
                  np.zeros((8, 3, 7, 7), np.float32), stride=4, pad=3).shape == (8, 56, 56)


def test_trunc_normal_bounds_and_determinism():
    a = trunc_normal(np.random.default_rng(5), (1000,), std=0.02, dtype=np.float64)
    b = trunc_normal(np.random.default_rng(5), (1000,), std=0.02, dtype=np.float64)
    assert np.array_equal(a, b) and np.abs(a).max() <= 0.04
    assert 0.015 < a.std() < 0.02


def test_operations_are_pure(rng):
    x = rng.standard_normal((2, 6, 6))
    before = x.copy()
    adaptive_avg_pool(x, 3, 3)
    depthwise_conv3x3(x, np.ones((2, 3, 3)))
    assert np.array_equal(x, before)
