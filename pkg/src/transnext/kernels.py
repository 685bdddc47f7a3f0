"""Fused sliding-window attention kernels and their naive unfold counterparts.

The fused kernels walk output tiles and read window neighbours straight from
``q``/``k``/``v``; the only scratch is one tile of float64 accumulators. The
naive path materialises the unfolded ``[heads, H, W, k*k, d]`` tensor first.

Both paths accumulate in float64 in the same order (channels in order for
similarities, window slots in row-major order for aggregation) and round once
at the end, so they agree bit for bit.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .tensor import ShapeError, sentinel
from .window import WindowGeometry, build_geometry

DEFAULT_TILE = 8
BENCH_HEADER = "case,h,w,c,heads,k,iters,ns_per_iter,scratch_bytes"


@dataclass
class KernelWorkspace:
    """Per-call scratch for the fused kernels; its size depends only on the tile."""

    tile: int = DEFAULT_TILE
    width: int = 1
    acc_dtype: type = np.float64
    buffer: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError(f"tile must be positive, got {self.tile}")
        self.buffer = np.zeros((self.tile, self.tile, self.width), dtype=self.acc_dtype)

    @property
    def scratch_bytes(self) -> int:
        return self.buffer.nbytes


class ScratchMeter:
    """Tracks live temporary bytes and their high-water mark."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, arr: np.ndarray) -> np.ndarray:
        self.live += arr.nbytes
        self.peak = max(self.peak, self.live)
        return arr

    def free(self, arr: np.ndarray) -> None:
        self.live -= arr.nbytes


def _check(q: np.ndarray, geom: WindowGeometry, name: str) -> None:
    if q.ndim != 4 or q.shape[1:3] != (geom.h, geom.w):
        raise ShapeError(f"{name} must be [heads, {geom.h}, {geom.w}, d], got {q.shape}")


@numba.njit(cache=True)
def _qk_kernel(q, k, ksize, tile, neg, out, scratch):
    nh, H, W, d = q.shape
    r = ksize // 2
    S = ksize * ksize
    for h in range(nh):
        for ti in range(0, H, tile):
            ie = min(ti + tile, H)
            for tj in range(0, W, tile):
                je = min(tj + tile, W)
                for i in range(ti, ie):
                    for j in range(tj, je):
                        for s in range(S):
                            ii = i + s // ksize - r
                            jj = j + s % ksize - r
                            if ii < 0 or ii >= H or jj < 0 or jj >= W:
                                scratch[i - ti, j - tj, s] = neg
                            else:
                                acc = 0.0
                                for c in range(d):
                                    acc += np.float64(q[h, i, j, c]) * np.float64(k[h, ii, jj, c])
                                scratch[i - ti, j - tj, s] = acc
                for i in range(ti, ie):
                    for j in range(tj, je):
                        for s in range(S):
                            out[h, i, j, s] = scratch[i - ti, j - tj, s]


@numba.njit(cache=True)
def _av_kernel(attn, v, ksize, tile, out, scratch):
    nh, H, W, d = v.shape
    r = ksize // 2
    S = ksize * ksize
    for h in range(nh):
        for ti in range(0, H, tile):
            ie = min(ti + tile, H)
            for tj in range(0, W, tile):
                je = min(tj + tile, W)
                for i in range(ti, ie):
                    for j in range(tj, je):
                        for c in range(d):
                            scratch[i - ti, j - tj, c] = 0.0
                        for s in range(S):
                            a = np.float64(attn[h, i, j, s])
                            ii = i + s // ksize - r
                            jj = j + s % ksize - r
                            if ii < 0 or ii >= H or jj < 0 or jj >= W:
                                # zero-padded neighbour, kept so rounding matches the unfold path
                                for c in range(d):
                                    scratch[i - ti, j - tj, c] += a * 0.0
                            else:
                                for c in range(d):
                                    scratch[i - ti, j - tj, c] += a * np.float64(v[h, ii, jj, c])
                for i in range(ti, ie):
                    for j in range(tj, je):
                        for c in range(d):
                            out[h, i, j, c] = scratch[i - ti, j - tj, c]


@numba.njit(cache=True)
def _backward_kernel(gl, go, q, k, v, attn, ksize, dq, dk, dv, da):
    nh, H, W, d = q.shape
    r = ksize // 2
    S = ksize * ksize
    for h in range(nh):
        for i in range(H):
            for j in range(W):
                for c in range(d):
                    accq = 0.0
                    acck = 0.0
                    accv = 0.0
                    for s in range(S):
                        di = s // ksize - r
                        dj = s % ksize - r
                        ii = i + di
                        jj = j + dj
                        if 0 <= ii < H and 0 <= jj < W:
                            accq += np.float64(gl[h, i, j, s]) * np.float64(k[h, ii, jj, c])
                        # pixel (i, j) is slot s of the query at (i - di, j - dj)
                        si = i - di
                        sj = j - dj
                        if 0 <= si < H and 0 <= sj < W:
                            acck += np.float64(gl[h, si, sj, s]) * np.float64(q[h, si, sj, c])
                            accv += np.float64(attn[h, si, sj, s]) * np.float64(go[h, si, sj, c])
                    dq[h, i, j, c] = accq
                    dk[h, i, j, c] = acck
                    dv[h, i, j, c] = accv
                for s in range(S):
                    ii = i + s // ksize - r
                    jj = j + s % ksize - r
                    acca = 0.0
                    if 0 <= ii < H and 0 <= jj < W:
                        for c in range(d):
                            acca += np.float64(go[h, i, j, c]) * np.float64(v[h, ii, jj, c])
                    da[h, i, j, s] = acca


def fused_window_qk(q: np.ndarray, k: np.ndarray, geom: WindowGeometry,
                    workspace: KernelWorkspace | None = None) -> np.ndarray:
    """Window similarities ``logits[h, i, j, s] = <q[h, i, j], k[window slot s]>``.

    Out-of-bounds slots hold the dtype's most negative finite value.
    """
    _check(q, geom, "q")
    if k.shape != q.shape:
        raise ShapeError(f"k shape {k.shape} differs from q shape {q.shape}")
    dtype = np.result_type(q, k)
    if workspace is None or workspace.width < geom.slots:
        workspace = KernelWorkspace(tile=workspace.tile if workspace else DEFAULT_TILE,
                                    width=geom.slots)
    out = np.empty(q.shape[:3] + (geom.slots,), dtype=dtype)
    _qk_kernel(np.ascontiguousarray(q, dtype), np.ascontiguousarray(k, dtype),
               geom.k, workspace.tile, sentinel(dtype), out, workspace.buffer)
    return out


def fused_window_av(attn: np.ndarray, v: np.ndarray, geom: WindowGeometry,
                    workspace: KernelWorkspace | None = None) -> np.ndarray:
    """Window aggregation ``out[h, i, j] = sum_s attn[h, i, j, s] * v[window slot s]``."""
    _check(v, geom, "v")
    if attn.shape != v.shape[:3] + (geom.slots,):
        raise ShapeError(f"attn must be {v.shape[:3] + (geom.slots,)}, got {attn.shape}")
    dtype = np.result_type(attn, v)
    d = v.shape[-1]
    if workspace is None or workspace.width < d:
        workspace = KernelWorkspace(tile=workspace.tile if workspace else DEFAULT_TILE, width=d)
    out = np.empty(v.shape, dtype=dtype)
    _av_kernel(np.ascontiguousarray(attn, dtype), np.ascontiguousarray(v, dtype),
               geom.k, workspace.tile, out, workspace.buffer)
    return out


def fused_window_backward(grad_logits: np.ndarray, grad_out: np.ndarray,
                          q: np.ndarray, k: np.ndarray, v: np.ndarray,
                          attn: np.ndarray, geom: WindowGeometry):
    """Gradients of :func:`fused_window_qk` and :func:`fused_window_av`.

    ``grad_logits`` is the upstream gradient of the similarity output and
    ``grad_out`` that of the aggregation output. Masked slots carry no
    gradient into ``q``/``k`` (their logits are constants). Returns
    ``(dq, dk, dv, dattn)``.
    """
    for name, t in (("q", q), ("k", k), ("v", v), ("grad_out", grad_out)):
        _check(t, geom, name)
    slots_shape = q.shape[:3] + (geom.slots,)
    if grad_logits.shape != slots_shape or attn.shape != slots_shape:
        raise ShapeError(f"grad_logits and attn must be {slots_shape}")
    if not (q.shape == k.shape and v.shape == grad_out.shape and v.shape[:3] == q.shape[:3]):
        raise ShapeError("q/k and v/grad_out shapes must agree")
    dtype = np.result_type(q, k, v, attn, grad_logits, grad_out)
    dq = np.empty(q.shape, dtype=dtype)
    dk = np.empty(k.shape, dtype=dtype)
    dv = np.empty(v.shape, dtype=dtype)
    da = np.empty(slots_shape, dtype=dtype)
    args = [np.ascontiguousarray(t, dtype) for t in (grad_logits, grad_out, q, k, v, attn)]
    _backward_kernel(*args, geom.k, dq, dk, dv, da)
    return dq, dk, dv, da


def unfold(x: np.ndarray, k: int) -> np.ndarray:
    """Explicit zero-padded window extraction: ``[nh, H, W, d] -> [nh, H, W, k*k, d]``."""
    nh, H, W, d = x.shape
    r = k // 2
    xp = np.pad(x, [(0, 0), (r, r), (r, r), (0, 0)])
    out = np.empty((nh, H, W, k * k, d), dtype=x.dtype)
    for s in range(k * k):
        di, dj = divmod(s, k)
        out[:, :, :, s, :] = xp[:, di:di + H, dj:dj + W, :]
    return out


def naive_window_qk(q: np.ndarray, k: np.ndarray, geom: WindowGeometry,
                    meter: ScratchMeter | None = None) -> np.ndarray:
    """Unfold-based reference for :func:`fused_window_qk`."""
    _check(q, geom, "q")
    meter = meter or ScratchMeter()
    dtype = np.result_type(q, k)
    ku = meter.alloc(unfold(np.asarray(k, dtype), geom.k))
    acc = meter.alloc(np.zeros(ku.shape[:4], dtype=np.float64))
    q64 = np.asarray(q, dtype)
    for c in range(q.shape[-1]):
        acc += q64[..., c, None].astype(np.float64) * ku[..., c].astype(np.float64)
    acc[:, geom.mask] = sentinel(dtype)
    out = acc.astype(dtype)
    meter.free(acc)
    meter.free(ku)
    return out


def naive_window_av(attn: np.ndarray, v: np.ndarray, geom: WindowGeometry,
                    meter: ScratchMeter | None = None) -> np.ndarray:
    """Unfold-based reference for :func:`fused_window_av`."""
    _check(v, geom, "v")
    meter = meter or ScratchMeter()
    dtype = np.result_type(attn, v)
    vu = meter.alloc(unfold(np.asarray(v, dtype), geom.k))
    acc = meter.alloc(np.zeros(v.shape, dtype=np.float64))
    a = np.asarray(attn, dtype)
    for s in range(geom.slots):
        acc += a[..., s, None].astype(np.float64) * vu[..., s, :].astype(np.float64)
    out = acc.astype(dtype)
    meter.free(acc)
    meter.free(vu)
    return out


@dataclass
class BenchResult:
    case: str
    h: int
    w: int
    c: int
    heads: int
    k: int
    iters: int
    ns_per_iter: float
    scratch_bytes: int

    def csv_row(self) -> str:
        return (f"{self.case},{self.h},{self.w},{self.c},{self.heads},{self.k},"
                f"{self.iters},{self.ns_per_iter:.0f},{self.scratch_bytes}")


def bench(case: str, h: int, w: int, c: int, heads: int, k: int, iters: int,
          tile: int = DEFAULT_TILE, warmup: int = 3, seed: int = 0,
          dtype=np.float32) -> BenchResult:
    """Time one window-path forward (similarity + aggregation) per iteration.

    Reports the median wall time and the scratch high-water mark.
    """
    if case not in ("fused", "naive"):
        raise ValueError(f"unknown bench case {case!r}")
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    warmup = max(warmup, 3)
    d = c // heads
    rng = np.random.default_rng(seed)
    geom = build_geometry(h, w, k, 0, 0)
    q, kk, v = (rng.standard_normal((heads, h, w, d)).astype(dtype) for _ in range(3))
    attn = rng.random((heads, h, w, k * k)).astype(dtype)

    if case == "fused":
        ws_qk = KernelWorkspace(tile=tile, width=k * k)
        ws_av = KernelWorkspace(tile=tile, width=d)
        scratch = max(ws_qk.scratch_bytes, ws_av.scratch_bytes)

        def step():
            fused_window_qk(q, kk, geom, ws_qk)
            fused_window_av(attn, v, geom, ws_av)
    else:
        meter = ScratchMeter()
        scratch = 0

        def step():
            naive_window_qk(q, kk, geom, meter)
            naive_window_av(attn, v, geom, meter)

    for _ in range(warmup):
        step()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        step()
        times.append(time.perf_counter_ns() - t0)
    if case == "naive":
        scratch = meter.peak
    return BenchResult(case, h, w, c, heads, k, iters, float(statistics.median(times)), scratch)
