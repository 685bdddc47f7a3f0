import numpy as np
import pytest

from transnext import oracles
from transnext.kernels import (BENCH_HEADER, KernelWorkspace, ScratchMeter, bench,
                               fused_window_av, fused_window_backward, fused_window_qk,
                               naive_window_av, naive_window_qk, unfold)
from transnext.selftest import fd_backward_error
from transnext.tensor import ShapeError
from transnext.window import build_geometry, slot_offsets

GEOMS = [(8, 8, 3), (5, 7, 5), (1, 1, 1), (3, 3, 3), (9, 4, 7), (6, 6, 1)]


def test_geometry_counts():
    g = build_geometry(10, 10, 3, 2, 2)
    assert g.n_eff[5, 5] == 13
    assert g.mask[0, 0].sum() == 5 and g.n_eff[0, 0] == 8
    assert not build_geometry(4, 4, 1, 1, 1).mask.any()
    assert np.array_equal(g.n_eff, 9 + 4 - g.mask.sum(-1))
    assert not g.mask[1:-1, 1:-1].any()


def test_geometry_rejects_even_window():
    from transnext.tensor import ConfigError
    with pytest.raises(ConfigError):
        build_geometry(4, 4, 2, 1, 1)


def test_slot_order_is_row_major_with_centre_in_middle():
    off = slot_offsets(3)
    assert off[0].tolist() == [-1, -1] and off[4].tolist() == [0, 0] and off[5].tolist() == [0, 1]


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("h,w,k", GEOMS)
def test_fused_qk_bit_identical_to_unfold(rng, dtype, h, w, k):
    g = build_geometry(h, w, k, 0, 0)
    q, kk = (rng.standard_normal((3, h, w, 4)).astype(dtype) for _ in range(2))
    fused = fused_window_qk(q, kk, g)
    assert fused.dtype == dtype
    assert np.array_equal(fused, naive_window_qk(q, kk, g))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("h,w,k", GEOMS)
def test_fused_av_bit_identical_to_unfold(rng, dtype, h, w, k):
    g = build_geometry(h, w, k, 0, 0)
    a = rng.random((3, h, w, k * k)).astype(dtype)
    v = rng.standard_normal((3, h, w, 4)).astype(dtype)
    assert np.array_equal(fused_window_av(a, v, g), naive_window_av(a, v, g))


def test_fused_qk_matches_scalar_loops(rng):
    g = build_geometry(5, 6, 3, 0, 0)
    q, kk = (rng.standard_normal((2, 5, 6, 3)) for _ in range(2))
    ref = oracles.window_qk_loops(q, kk, 3)
    out = fused_window_qk(q, kk, g)
    valid = ~np.isnan(ref)
    np.testing.assert_allclose(out[valid], ref[valid], atol=1e-13)
    assert np.all(out[~valid] == np.finfo(np.float64).min)


def test_fused_qk_k1_is_pointwise_dot(rng):
    g = build_geometry(4, 5, 1, 0, 0)
    q, kk = (rng.standard_normal((2, 4, 5, 3)) for _ in range(2))
    np.testing.assert_allclose(fused_window_qk(q, kk, g)[..., 0], (q * kk).sum(-1), atol=1e-15)


def test_fused_qk_one_hot_fields():
    g = build_geometry(3, 3, 3, 0, 0)
    q = np.zeros((1, 3, 3, 9))
    for p in range(9):
        q[0, p // 3, p % 3, p] = 1.0
    out = fused_window_qk(q, q, g)
    # only the centre slot sees the same one-hot channel
    assert np.all(out[0, :, :, 4] == 1.0)
    others = np.delete(out[0], 4, axis=-1)
    assert np.all((others == 0.0) | (others == np.finfo(np.float64).min))


def test_fused_av_centre_one_hot_is_identity(rng):
    g = build_geometry(5, 5, 3, 0, 0)
    a = np.zeros((2, 5, 5, 9))
    a[..., 4] = 1.0
    v = rng.standard_normal((2, 5, 5, 3))
    assert np.array_equal(fused_window_av(a, v, g), v)


def test_fused_av_uniform_is_box_filter(rng):
    g = build_geometry(6, 6, 3, 0, 0)
    a = np.where(g.mask, 0.0, 1.0 / 9)[None]
    v = rng.standard_normal((1, 6, 6, 2))
    out = fused_window_av(a, v, g)
    box = sum(np.pad(v, ((0, 0), (1, 1), (1, 1), (0, 0)))[:, di:di + 6, dj:dj + 6]
              for di in range(3) for dj in range(3)) / 9
    np.testing.assert_allclose(out, box, atol=1e-14)


def test_fused_shape_errors(rng):
    g = build_geometry(4, 4, 3, 0, 0)
    with pytest.raises(ShapeError):
        fused_window_qk(np.ones((1, 4, 5, 2)), np.ones((1, 4, 5, 2)), g)
    with pytest.raises(ShapeError):
        fused_window_av(np.ones((1, 4, 4, 4)), np.ones((1, 4, 4, 2)), g)


def test_backward_zero_upstream_gives_zero(rng):
    g = build_geometry(4, 4, 3, 0, 0)
    q, k, v = (rng.standard_normal((1, 4, 4, 3)) for _ in range(3))
    a = rng.random((1, 4, 4, 9))
    grads = fused_window_backward(np.zeros((1, 4, 4, 9)), np.zeros((1, 4, 4, 3)), q, k, v, a, g)
    assert all(np.all(t == 0) for t in grads)


def test_backward_dv_uniform_is_box_scatter(rng):
    g = build_geometry(5, 5, 3, 0, 0)
    a = np.full((1, 5, 5, 9), 1.0 / 9)
    go = rng.standard_normal((1, 5, 5, 2))
    z = np.zeros((1, 5, 5, 2))
    _, _, dv, _ = fused_window_backward(np.zeros((1, 5, 5, 9)), go, z, z, z, a, g)
    padded = np.zeros((1, 7, 7, 2))
    for di in range(3):
        for dj in range(3):
            padded[:, di:di + 5, dj:dj + 5] += go / 9
    np.testing.assert_allclose(dv, padded[:, 1:6, 1:6], atol=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed):
    assert fd_backward_error(seed=seed) <= 1e-6


def test_backward_finite_differences_k5_multihead():
    assert fd_backward_error(seed=3, h=5, w=6, d=2, k=5) <= 1e-6


def test_unfold_layout(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    u = unfold(x, 3)
    assert u.shape == (1, 4, 4, 9, 2)
    assert np.array_equal(u[0, 2, 2, 0], x[0, 1, 1])
    assert np.all(u[0, 0, 0, 0] == 0)


def test_deterministic_across_tile_sizes(rng):
    g = build_geometry(13, 11, 3, 0, 0)
    q, k = (rng.standard_normal((2, 13, 11, 5)).astype(np.float32) for _ in range(2))
    ref = fused_window_qk(q, k, g, KernelWorkspace(tile=8, width=9))
    for tile in (1, 3, 4, 16):
        assert np.array_equal(fused_window_qk(q, k, g, KernelWorkspace(tile=tile, width=9)), ref)


def test_workspace_size_independent_of_map():
    assert KernelWorkspace(8, 9).scratch_bytes == 8 * 8 * 9 * 8


def test_scratch_meter_peak():
    m = ScratchMeter()
    a = m.alloc(np.zeros(100, np.uint8))
    m.alloc(np.zeros(50, np.uint8))
    m.free(a)
    m.alloc(np.zeros(10, np.uint8))
    assert m.peak == 150 and m.live == 60


def test_bench_schema_and_memory_contract():
    assert BENCH_HEADER == "case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes"
    r = bench("fused", 8, 8, 24, 1, 3, 2)
    fields = r.csv_row().split(",")
    assert len(fields) == 9 and fields[0] == "fused"
    fused = {bench("fused", h, h, 24, 1, 3, 1).scratch_bytes for h in (8, 16, 32)}
    naive = [bench("naive", h, h, 24, 1, 3, 1).scratch_bytes for h in (8, 16)]
    assert len(fused) == 1 and naive[1] == 4 * naive[0] and fused.pop() < naive[0]


def test_bench_rejects_bad_case():
    with pytest.raises(ValueError):
        bench("gpu", 8, 8, 24, 1, 3, 1)


@pytest.mark.slow
def test_bench_iteration_medians_consistent():
    one = bench("fused", 32, 32, 24, 1, 3, 1, warmup=5).ns_per_iter
    many = bench("fused", 32, 32, 24, 1, 3, 100, warmup=5).ns_per_iter
    assert many / 3 <= one <= many * 3


@pytest.mark.slow
def test_fused_faster_than_naive_at_stage_one_scale():
    fused = bench("fused", 56, 56, 72, 3, 3, 5).ns_per_iter
    naive = bench("naive", 56, 56, 72, 3, 3, 5).ns_per_iter
    assert fused <= naive
