import numpy as np
import pytest

from transnext.pfa import (activate_and_pool, init_pfa_params, pfa_concat_oracle, pfa_forward)
from transnext.tensor import (LinearParams, ShapeError, adaptive_avg_pool, gelu, layernorm,
                              linear)
from transnext.window import build_geometry


def _identity_linear(c):
    return LinearParams(np.eye(c), np.zeros(c))


def test_activate_and_pool_constant_input_normalises_to_zero(rng):
    p = init_pfa_params(rng, 8, 2, 3)
    p.pool_proj = _identity_linear(8)
    x = np.full((8, 6, 6), 0.7)
    out = activate_and_pool(x, p, build_geometry(6, 6, 3, 2, 3))
    assert out.shape == (8, 2, 3) and np.all(out == 0.0)


def test_activate_and_pool_stage_one_extent(rng):
    p = init_pfa_params(rng, 48, 2, 3, dtype=np.float32)
    x = rng.standard_normal((48, 56, 56)).astype(np.float32)
    assert activate_and_pool(x, p, build_geometry(56, 56, 3, 7, 7)).shape == (48, 7, 7)


def test_activate_and_pool_matches_composition(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    x = rng.standard_normal((8, 5, 7))
    a = gelu(linear(x.transpose(1, 2, 0), p.pool_proj)).transpose(2, 0, 1)
    ref = layernorm(adaptive_avg_pool(a, 2, 3).transpose(1, 2, 0), p.pool_norm.gamma,
                    p.pool_norm.beta).transpose(2, 0, 1)
    np.testing.assert_allclose(activate_and_pool(x, p, build_geometry(5, 7, 3, 2, 3)), ref,
                               atol=1e-12)


def test_zero_similarity_gives_uniform_mean(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 4, 1, 3), rng)
    p.q = LinearParams(np.zeros((4, 4)), np.zeros(4))
    p.window_bias[:] = 0
    p.proj = _identity_linear(4)
    x = rng.standard_normal((4, 4, 5))
    g = build_geometry(4, 5, 3, 2, 2)
    out = pfa_forward(x, p, g)
    t = x.transpose(1, 2, 0)
    v = linear(t, p.v)
    vp = linear(activate_and_pool(x, p, g).transpose(1, 2, 0).reshape(-1, 4), p.v)
    for i in range(4):
        for j in range(5):
            win = [v[i + di, j + dj] for di in (-1, 0, 1) for dj in (-1, 0, 1)
                   if 0 <= i + di < 4 and 0 <= j + dj < 5]
            expect = (np.sum(win, axis=0) + vp.sum(0)) / g.n_eff[i, j]
            np.testing.assert_allclose(out[:, i, j], expect, atol=1e-12)


def test_weights_masked_exactly_and_normalised(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    g = build_geometry(5, 6, 3, 2, 2)
    _, w = pfa_forward(rng.standard_normal((8, 5, 6)), p, g, return_weights=True)
    assert np.all(w[..., :9][np.broadcast_to(g.mask, w[..., :9].shape)] == 0.0)
    assert np.abs(w.sum(-1) - 1).max() <= 1e-6


@pytest.mark.parametrize("h,w,k,ph,pw", [(5, 7, 3, 2, 3), (1, 1, 1, 1, 1), (3, 3, 5, 1, 2),
                                         (6, 4, 3, 3, 4), (7, 7, 7, 2, 2)])
def test_dual_path_matches_concat_oracle_f64(rng, scrambled, h, w, k, ph, pw):
    p = scrambled(init_pfa_params(rng, 8, 2, k), rng)
    x = rng.standard_normal((8, h, w))
    g = build_geometry(h, w, k, ph, pw)
    bias = rng.standard_normal((2, h * w, ph * pw))
    np.testing.assert_allclose(pfa_forward(x, p, g, bias), pfa_concat_oracle(x, p, g, bias),
                               rtol=0, atol=1e-12)


def test_dual_path_matches_concat_oracle_f32(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    p32 = init_pfa_params(rng, 8, 2, 3, dtype=np.float32)
    for name in ("q", "k", "v", "pool_proj", "proj"):
        src = getattr(p, name)
        setattr(p32, name, LinearParams(src.weight.astype(np.float32), src.bias.astype(np.float32)))
    p32.window_bias = p.window_bias.astype(np.float32)
    x = rng.standard_normal((8, 5, 7)).astype(np.float32)
    g = build_geometry(5, 7, 3, 2, 3)
    out = pfa_forward(x, p32, g)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, pfa_concat_oracle(x, p32, g), rtol=0, atol=1e-6)


def test_concat_oracle_single_pixel_without_pool_is_value(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 4, 1, 1), rng)
    p.proj = _identity_linear(4)
    x = rng.standard_normal((4, 1, 1))
    g = build_geometry(1, 1, 1, 1, 1)
    out = pfa_forward(x, p, g, use_pool=False)
    np.testing.assert_allclose(out[:, 0, 0], linear(x[:, 0, 0], p.v), atol=1e-15)
    np.testing.assert_allclose(pfa_forward(x, p, g), pfa_concat_oracle(x, p, g), atol=1e-15)


def test_doubling_values_doubles_output(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    p.proj.bias[:] = 0
    x = rng.standard_normal((8, 5, 5))
    g = build_geometry(5, 5, 3, 2, 2)
    base = pfa_forward(x, p, g)
    p.v = LinearParams(p.v.weight * 2, p.v.bias * 2)
    assert np.array_equal(pfa_forward(x, p, g), 2 * base)


def test_window_path_translation_equivariant(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    p.window_bias[:] = 0
    g = build_geometry(12, 12, 3, 1, 1)
    x = rng.standard_normal((8, 12, 12))
    y = pfa_forward(x, p, g, use_pool=False)
    ys = pfa_forward(np.roll(x, 1, axis=2), p, g, use_pool=False)
    k = 3
    np.testing.assert_array_equal(ys[:, k:-k, k + 1:-k], y[:, k:-k, k:-k - 1])


def test_permuting_within_pool_bucket_is_invisible_far_away(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    g = build_geometry(8, 8, 3, 2, 2)
    x = rng.standard_normal((8, 8, 8))
    y = x.copy()
    y[:, 0, 0], y[:, 1, 2] = x[:, 1, 2].copy(), x[:, 0, 0].copy()  # both in bucket (0, 0)
    np.testing.assert_allclose(pfa_forward(y, p, g)[:, 5:, 5:], pfa_forward(x, p, g)[:, 5:, 5:],
                               atol=1e-12)


def test_batched_equals_per_image(rng, scrambled):
    p = scrambled(init_pfa_params(rng, 8, 2, 3), rng)
    g = build_geometry(4, 5, 3, 2, 2)
    xs = rng.standard_normal((3, 8, 4, 5))
    batch = pfa_forward(xs, p, g)
    for b in range(3):
        np.testing.assert_allclose(batch[b], pfa_forward(xs[b], p, g), atol=1e-14)


def test_shape_mismatch_raises(rng):
    p = init_pfa_params(rng, 8, 2, 3)
    with pytest.raises(ShapeError):
        pfa_forward(np.zeros((8, 5, 5)), p, build_geometry(4, 5, 3, 2, 2))
    with pytest.raises(ShapeError):
        pfa_forward(np.zeros((6, 4, 5)), p, build_geometry(4, 5, 3, 2, 2))
