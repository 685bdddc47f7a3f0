"""Aggregated attention and the length-scaled cosine MHSA used in the last stage.

Aggregated attention extends pixel-focused attention with

* a learnable query embedding added to every normalised query,
* learnable positional tokens whose product with the query is added to the
  window weights after the softmax,
* cosine similarity scaled by ``tau * ln(n_eff)`` where ``n_eff`` excludes
  padded window slots,
* a learnable window bias plus a log-spaced continuous position bias (an MLP
  over relative coordinates) on the pooled path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .kernels import fused_window_av, fused_window_qk
from .pfa import (PfaParams, _check_input, _linear_init, activate_and_pool_tokens,
                  from_tokens, init_pfa_params, joint_softmax, merge_heads, split_heads,
                  split_tokens, to_tokens)
from .tensor import (DomainError, LinearParams, ShapeError, inverse_softplus, l2_normalize,
                     linear, relu, softmax, softplus, trunc_normal)
from .window import WindowGeometry

TAU_INIT = 1.0 / 0.24
CPB_HIDDEN = 512
_CPB_CHUNK = 8192


@dataclass
class AggAttentionParams(PfaParams):
    qe: Optional[np.ndarray]           # [heads, head_dim]; None disables the query embedding
    pos_tokens: Optional[np.ndarray]   # [heads, head_dim, k*k]; None disables positional attention
    tau: np.ndarray                    # [heads], pre-softplus
    cpb_fc1: LinearParams              # 2 -> hidden
    cpb_fc2: LinearParams              # hidden -> heads


@dataclass
class MhsaParams:
    heads: int
    head_dim: int
    q: LinearParams
    k: LinearParams
    v: LinearParams
    proj: LinearParams
    qe: Optional[np.ndarray]
    tau: np.ndarray

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


def init_agg_params(rng: np.random.Generator, dim: int, heads: int, k: int,
                    dtype=np.float64, query_embedding: bool = True,
                    positional_tokens: bool = True, cpb_hidden: int = CPB_HIDDEN
                    ) -> AggAttentionParams:
    base = init_pfa_params(rng, dim, heads, k, dtype)
    d = dim // heads
    qe = trunc_normal(rng, (heads, d), dtype=dtype) if query_embedding else None
    tokens = trunc_normal(rng, (heads, d, k * k), dtype=dtype) if positional_tokens else None
    fc2 = LinearParams(np.zeros((heads, cpb_hidden), dtype), np.zeros(heads, dtype))
    return AggAttentionParams(
        **vars(base), qe=qe, pos_tokens=tokens,
        tau=np.full(heads, inverse_softplus(TAU_INIT), dtype=dtype),
        cpb_fc1=_linear_init(rng, cpb_hidden, 2, dtype), cpb_fc2=fc2)


def init_mhsa_params(rng: np.random.Generator, dim: int, heads: int, dtype=np.float64,
                     query_embedding: bool = True) -> MhsaParams:
    d = dim // heads
    return MhsaParams(
        heads=heads, head_dim=d,
        q=_linear_init(rng, dim, dim, dtype), k=_linear_init(rng, dim, dim, dtype),
        v=_linear_init(rng, dim, dim, dtype), proj=_linear_init(rng, dim, dim, dtype),
        qe=trunc_normal(rng, (heads, d), dtype=dtype) if query_embedding else None,
        tau=np.full(heads, inverse_softplus(TAU_INIT), dtype=dtype))


def length_scale(tau: float, n_eff) -> np.ndarray | float:
    """Attention temperature ``tau * ln(n_eff)``; ``n_eff`` counts unmasked keys."""
    n = np.asarray(n_eff)
    if np.any(n < 1):
        raise DomainError("effective key count must be >= 1")
    if tau <= 0:
        raise DomainError("tau must be positive")
    out = tau * np.log(n.astype(np.float64))
    return float(out) if out.ndim == 0 else out


def cosine_normalize(x: np.ndarray) -> np.ndarray:
    return l2_normalize(x, eps=1e-12)


# relative coordinates between pixels and pooled cells

def pool_centers(size: int, out: int) -> np.ndarray:
    """Centre of each adaptive-pool bucket, in input pixel index units."""
    lo = (np.arange(out) * size) // out
    hi = -((-(np.arange(out) + 1) * size) // out)
    return (lo + hi - 1) / 2.0


def log_spaced(delta: np.ndarray) -> np.ndarray:
    return np.sign(delta) * np.log2(1.0 + np.abs(delta)) / np.log2(8.0)


@dataclass(frozen=True)
class RelativeCoords:
    """Query-to-pooled-cell offsets, stored per axis.

    ``values_h[idx_h[i, a]]`` is the log-spaced row offset between query row
    ``i`` and pooled row ``a`` (same for columns). The full ``[h*w, P, 2]``
    table is available through :attr:`delta`.
    """

    h: int
    w: int
    pool_h: int
    pool_w: int
    values_h: np.ndarray
    idx_h: np.ndarray
    values_w: np.ndarray
    idx_w: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        dh = self.values_h[self.idx_h]  # [h, ph]
        dw = self.values_w[self.idx_w]  # [w, pw]
        full_h = np.broadcast_to(dh[:, None, :, None], (self.h, self.w, self.pool_h, self.pool_w))
        full_w = np.broadcast_to(dw[None, :, None, :], (self.h, self.w, self.pool_h, self.pool_w))
        return np.stack([full_h, full_w], axis=-1).reshape(self.h * self.w, -1, 2)

    @property
    def table_size(self) -> int:
        return self.values_h.size * self.values_w.size


def _axis_table(size: int, out: int):
    raw = np.arange(size)[:, None] - pool_centers(size, out)[None, :]
    uniq, inv = np.unique(raw, return_inverse=True)
    return log_spaced(uniq), inv.reshape(size, out)


@lru_cache(maxsize=64)
def relative_coords(h: int, w: int, pool_h: int, pool_w: int) -> RelativeCoords:
    """Memoised per resolution; every result is read-only."""
    vh, ih = _axis_table(h, pool_h)
    vw, iw = _axis_table(w, pool_w)
    for a in (vh, ih, vw, iw):
        a.setflags(write=False)
    return RelativeCoords(h, w, pool_h, pool_w, vh, ih, vw, iw)


def cpb_mlp(points: np.ndarray, fc1: LinearParams, fc2: LinearParams) -> np.ndarray:
    """Two-layer ReLU MLP over ``[..., 2]`` coordinates, evaluated in row chunks."""
    flat = points.reshape(-1, 2).astype(fc1.weight.dtype, copy=False)
    out = np.empty((flat.shape[0], fc2.out_features), dtype=fc1.weight.dtype)
    for s in range(0, flat.shape[0], _CPB_CHUNK):
        out[s:s + _CPB_CHUNK] = linear(relu(linear(flat[s:s + _CPB_CHUNK], fc1)), fc2)
    return out.reshape(*points.shape[:-1], fc2.out_features)


def log_cpb(coords: RelativeCoords, fc1: LinearParams, fc2: LinearParams) -> np.ndarray:
    """Continuous position bias ``[heads, h*w, P]`` for any resolution.

    The MLP runs once per distinct (row offset, column offset) pair and the
    result is gathered into the full table.
    """
    grid = np.stack(np.meshgrid(coords.values_h, coords.values_w, indexing="ij"), axis=-1)
    table = cpb_mlp(grid, fc1, fc2).transpose(2, 0, 1)  # [heads, nh_vals, nw_vals]
    bias = table[:, coords.idx_h[:, None, :, None], coords.idx_w[None, :, None, :]]
    return bias.reshape(table.shape[0], coords.h * coords.w, coords.pool_h * coords.pool_w)


def _resample_matrix(old: int, new: int, dtype) -> np.ndarray:
    m = np.zeros((new, old), dtype=dtype)
    if old == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(new) * (old - 1) / (new - 1) if new > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), old - 2)
    frac = pos - lo
    m[np.arange(new), lo] = 1.0 - frac
    m[np.arange(new), lo + 1] += frac
    return m


def interpolate_bias(bias: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear (corner-aligned) resampling of the last two axes of ``bias``."""
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"target extents must be positive, got ({new_h}, {new_w})")
    if bias.ndim < 2:
        raise ShapeError("bias needs two trailing grid axes")
    old_h, old_w = bias.shape[-2:]
    if (old_h, old_w) == (new_h, new_w):
        return bias.copy()
    mh = _resample_matrix(old_h, new_h, bias.dtype)
    mw = _resample_matrix(old_w, new_w, bias.dtype)
    return np.matmul(np.matmul(mh, bias), mw.T)


def interpolate_pool_bias(bias: np.ndarray, src: tuple[int, int, int, int],
                          dst: tuple[int, int, int, int]) -> np.ndarray:
    """Resample a ``[heads, h*w, ph*pw]`` pooled-path bias from ``src`` to ``dst`` extents.

    Both the query grid and the pooled grid are resampled bilinearly.
    """
    h, w, ph, pw = src
    H, W, PH, PW = dst
    b = bias.reshape(-1, h, w, ph, pw)
    b = interpolate_bias(b, PH, PW)                           # pooled axes
    b = interpolate_bias(b.transpose(0, 3, 4, 1, 2), H, W)    # query axes
    return np.ascontiguousarray(b.transpose(0, 3, 4, 1, 2)).reshape(-1, H * W, PH * PW)


def agg_tokens(x: np.ndarray, params: AggAttentionParams, geom: WindowGeometry,
               coords: Optional[RelativeCoords] = None, pool_bias: Optional[np.ndarray] = None,
               scale: Optional[float] = None, normalize: bool = True,
               return_weights: bool = False):
    """Aggregated attention on ``[B, H, W, C]`` tokens."""
    _check_input(x, params, geom)
    if geom.pool_size == 0:
        raise ShapeError("aggregated attention needs a non-empty pooled grid")
    b, nh, d = x.shape[0], params.heads, params.head_dim
    hw = geom.h * geom.w
    if pool_bias is None:
        coords = coords or relative_coords(geom.h, geom.w, geom.pool_h, geom.pool_w)
        pool_bias = log_cpb(coords, params.cpb_fc1, params.cpb_fc2)
    if pool_bias.shape != (nh, hw, geom.pool_size):
        raise ShapeError(f"pool bias must be {(nh, hw, geom.pool_size)}, got {pool_bias.shape}")
    norm = cosine_normalize if normalize else (lambda t: t)

    q = norm(split_heads(linear(x, params.q), nh))
    k = norm(split_heads(linear(x, params.k), nh))
    v = split_heads(linear(x, params.v), nh)
    pooled = activate_and_pool_tokens(x, params.pool_proj, params.pool_norm,
                                      geom.pool_h, geom.pool_w).reshape(b, -1, params.dim)
    kp = norm(split_tokens(linear(pooled, params.k), nh))
    vp = split_tokens(linear(pooled, params.v), nh)

    q_sim = q
    if params.qe is not None:
        q_sim = (q.reshape(b, nh, hw, d) + params.qe[None, :, None, :]).reshape(q.shape)
    win = fused_window_qk(q_sim, k, geom).reshape(b, nh, geom.h, geom.w, geom.slots)
    pool = (q_sim.reshape(b * nh, hw, d) @ kp.transpose(0, 2, 1)).reshape(b, nh, geom.h, geom.w, -1)

    if scale is None:
        lam = softplus(params.tau)[:, None, None] * np.log(geom.n_eff)[None]  # [nh, H, W]
        lam = lam.astype(x.dtype)[None, :, :, :, None]
    else:
        lam = x.dtype.type(scale)
    with np.errstate(over="ignore"):  # masked sentinels may overflow to -inf; masked below
        win = win * lam + params.window_bias[None, :, None, None, :]
    pool = pool * lam + pool_bias.reshape(nh, geom.h, geom.w, -1)[None]

    attn = joint_softmax(win, pool, geom)
    a_win = attn[..., :geom.slots]
    if params.pos_tokens is not None:
        dyn = np.matmul(q.reshape(b, nh, hw, d), params.pos_tokens[None])
        a_win = a_win + dyn.reshape(a_win.shape)
    out = fused_window_av(a_win.reshape(b * nh, geom.h, geom.w, geom.slots), v, geom)
    out = out + (attn[..., geom.slots:].reshape(b * nh, hw, -1) @ vp).reshape(out.shape)
    y = linear(merge_heads(out, b), params.proj)
    return (y, attn) if return_weights else y


def aggregated_attention_forward(x: np.ndarray, params: AggAttentionParams,
                                 geom: WindowGeometry, coords: Optional[RelativeCoords] = None,
                                 *, pool_bias: Optional[np.ndarray] = None,
                                 scale: Optional[float] = None, normalize: bool = True,
                                 return_weights: bool = False):
    """Aggregated attention on ``x[C, H, W]`` (or ``[B, C, H, W]``).

    ``coords`` defaults to the memoised table for the geometry. ``pool_bias``
    overrides the log-CPB bias (used for interpolated biases). ``scale`` replaces
    the per-pixel ``tau * ln(n_eff)`` with a constant and ``normalize=False``
    skips the L2 normalisation; together they recover pixel-focused attention.
    """
    t, batched = to_tokens(x)
    res = agg_tokens(t, params, geom, coords, pool_bias, scale, normalize, return_weights)
    if return_weights:
        return from_tokens(res[0], batched), res[1]
    return from_tokens(res, batched)


def mhsa_tokens(x: np.ndarray, params: MhsaParams, return_weights: bool = False):
    """Global length-scaled cosine attention on ``[B, N, C]`` tokens."""
    b, n, c = x.shape
    if c != params.dim:
        raise ShapeError(f"channels {c} != heads*head_dim {params.dim}")
    nh = params.heads
    q = cosine_normalize(split_tokens(linear(x, params.q), nh))
    k = cosine_normalize(split_tokens(linear(x, params.k), nh))
    v = split_tokens(linear(x, params.v), nh)
    if params.qe is not None:
        q = (q.reshape(b, nh, n, -1) + params.qe[None, :, None, :]).reshape(q.shape)
    lam = (softplus(params.tau) * math.log(n)).astype(x.dtype)
    logits = (q @ k.transpose(0, 2, 1)).reshape(b, nh, n, n) * lam[None, :, None, None]
    attn = softmax(logits)
    out = (attn.reshape(b * nh, n, n) @ v).reshape(b, nh, n, -1).transpose(0, 2, 1, 3)
    y = linear(out.reshape(b, n, c), params.proj)
    return (y, attn) if return_weights else y


def mhsa_stage4_forward(x: np.ndarray, params: MhsaParams, return_weights: bool = False):
    """Full self-attention over ``x[C, H, W]`` with normalised Q/K, query embedding
    and ``tau * ln(H*W)`` scaling. No relative position bias."""
    t, batched = to_tokens(x)
    b, h, w, c = t.shape
    res = mhsa_tokens(t.reshape(b, h * w, c), params, return_weights)
    y = res[0] if return_weights else res
    y = from_tokens(y.reshape(b, h, w, c), batched)
    return (y, res[1]) if return_weights else y


def softmax_entropy(logits: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


def entropy_sweep(ns=(16, 64, 256, 1024), d: int = 24, tau: float = TAU_INIT,
                  queries: int = 64, seed: int = 0) -> dict[int, float]:
    """Mean softmax entropy of length-scaled cosine attention over random unit Q/K."""
    rng = np.random.default_rng(seed)
    out = {}
    for n in ns:
        q = cosine_normalize(rng.standard_normal((queries, d)))
        k = cosine_normalize(rng.standard_normal((n, d)))
        out[n] = float(np.mean(softmax_entropy(tau * math.log(n) * (q @ k.T))))
    return out
