"""Pixel-focused attention: sliding-window and pooled paths in one softmax."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import fused_window_av, fused_window_qk
from .tensor import (LayerNormParams, LinearParams, ShapeError, adaptive_avg_pool,
                     gelu, layernorm, linear, sentinel, softmax, trunc_normal)
from .window import WindowGeometry, build_geometry

__all__ = ["PfaParams", "WindowGeometry", "activate_and_pool", "build_geometry",
           "init_pfa_params", "pfa_concat_oracle", "pfa_forward"]


@dataclass
class PfaParams:
    heads: int
    head_dim: int
    q: LinearParams
    k: LinearParams
    v: LinearParams
    pool_proj: LinearParams
    pool_norm: LayerNormParams
    proj: LinearParams
    window_bias: np.ndarray  # [heads, k*k]

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


def _linear_init(rng, n_out, n_in, dtype, bias=True) -> LinearParams:
    return LinearParams(trunc_normal(rng, (n_out, n_in), dtype=dtype),
                        np.zeros(n_out, dtype=dtype) if bias else None)


def init_pfa_params(rng: np.random.Generator, dim: int, heads: int, k: int,
                    dtype=np.float64) -> PfaParams:
    if dim % heads:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    return PfaParams(
        heads=heads, head_dim=dim // heads,
        q=_linear_init(rng, dim, dim, dtype),
        k=_linear_init(rng, dim, dim, dtype),
        v=_linear_init(rng, dim, dim, dtype),
        pool_proj=_linear_init(rng, dim, dim, dtype),
        pool_norm=LayerNormParams(np.ones(dim, dtype), np.zeros(dim, dtype)),
        proj=_linear_init(rng, dim, dim, dtype),
        window_bias=trunc_normal(rng, (heads, k * k), dtype=dtype),
    )


# layout helpers: tokens are [B, H, W, C]; per-head tensors fold B into the head axis

def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, h, w, c = x.shape
    d = c // heads
    return np.ascontiguousarray(
        x.reshape(b, h, w, heads, d).transpose(0, 3, 1, 2, 4)).reshape(b * heads, h, w, d)


def merge_heads(y: np.ndarray, batch: int) -> np.ndarray:
    bh, h, w, d = y.shape
    heads = bh // batch
    return y.reshape(batch, heads, h, w, d).transpose(0, 2, 3, 1, 4).reshape(batch, h, w, heads * d)


def split_tokens(x: np.ndarray, heads: int) -> np.ndarray:
    """``[B, N, C] -> [B*heads, N, d]``."""
    b, n, c = x.shape
    return np.ascontiguousarray(
        x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)).reshape(b * heads, n, c // heads)


def to_tokens(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Channel-first ``[C,H,W]`` or ``[B,C,H,W]`` to ``[B,H,W,C]``; flag says if batched."""
    if x.ndim == 3:
        return x.transpose(1, 2, 0)[None], False
    if x.ndim == 4:
        return x.transpose(0, 2, 3, 1), True
    raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")


def from_tokens(y: np.ndarray, batched: bool) -> np.ndarray:
    out = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    return out if batched else out[0]


def activate_and_pool_tokens(x: np.ndarray, proj: LinearParams, norm: LayerNormParams,
                             pool_h: int, pool_w: int) -> np.ndarray:
    """``LayerNorm(AvgPool(GELU(Linear(x))))`` on ``[B, H, W, C]`` tokens."""
    a = gelu(linear(x, proj))
    pooled = adaptive_avg_pool(a.transpose(0, 3, 1, 2), pool_h, pool_w).transpose(0, 2, 3, 1)
    return layernorm(pooled, norm.gamma, norm.beta)


def activate_and_pool(x: np.ndarray, params: PfaParams, geom: WindowGeometry) -> np.ndarray:
    """Pooled key/value source for ``x[C, H, W]``; returns ``[C, pool_h, pool_w]``."""
    t, batched = to_tokens(x)
    if t.shape[1:3] != (geom.h, geom.w) or t.shape[-1] != params.dim:
        raise ShapeError(f"input {x.shape} does not match geometry/params")
    y = activate_and_pool_tokens(t, params.pool_proj, params.pool_norm, geom.pool_h, geom.pool_w)
    return from_tokens(y, batched)


def joint_softmax(win_logits: np.ndarray, pool_logits: Optional[np.ndarray],
                  geom: WindowGeometry) -> np.ndarray:
    """One softmax over ``[k*k window | pooled]`` logits with the padding mask applied.

    ``win_logits`` is ``[B, heads, H, W, k*k]``, ``pool_logits`` ``[B, heads, H, W, P]``.
    """
    if pool_logits is None:
        return softmax(win_logits, geom.mask)
    logits = np.concatenate([win_logits, pool_logits], axis=-1)
    mask = np.concatenate([geom.mask, np.zeros((geom.h, geom.w, pool_logits.shape[-1]), bool)],
                          axis=-1)
    return softmax(logits, mask)


def _check_input(t: np.ndarray, params: PfaParams, geom: WindowGeometry) -> None:
    if t.shape[1:3] != (geom.h, geom.w):
        raise ShapeError(f"feature map {t.shape[1:3]} does not match geometry ({geom.h}, {geom.w})")
    if t.shape[-1] != params.dim:
        raise ShapeError(f"channels {t.shape[-1]} != heads*head_dim {params.dim}")
    if params.window_bias.shape != (params.heads, geom.slots):
        raise ShapeError(f"window_bias must be ({params.heads}, {geom.slots}), "
                         f"got {params.window_bias.shape}")


def pfa_tokens(x: np.ndarray, params: PfaParams, geom: WindowGeometry,
               pool_bias: Optional[np.ndarray] = None, use_pool: bool = True,
               return_weights: bool = False):
    """Pixel-focused attention on ``[B, H, W, C]`` tokens."""
    _check_input(x, params, geom)
    b, nh, d = x.shape[0], params.heads, params.head_dim
    hw = geom.h * geom.w
    scale = x.dtype.type(1.0 / np.sqrt(d))

    q = split_heads(linear(x, params.q), nh)
    k = split_heads(linear(x, params.k), nh)
    v = split_heads(linear(x, params.v), nh)
    win = fused_window_qk(q, k, geom).reshape(b, nh, geom.h, geom.w, geom.slots)
    win = win * scale + params.window_bias[None, :, None, None, :]

    pool_logits = vp = None
    if use_pool:
        pooled = activate_and_pool_tokens(x, params.pool_proj, params.pool_norm,
                                          geom.pool_h, geom.pool_w).reshape(b, -1, params.dim)
        kp = split_tokens(linear(pooled, params.k), nh)
        vp = split_tokens(linear(pooled, params.v), nh)
        pool_logits = (q.reshape(b * nh, hw, d) @ kp.transpose(0, 2, 1)) * scale
        pool_logits = pool_logits.reshape(b, nh, geom.h, geom.w, -1)
        if pool_bias is not None:
            pool_logits = pool_logits + pool_bias.reshape(nh, geom.h, geom.w, -1)[None]

    attn = joint_softmax(win, pool_logits, geom)
    a_win = attn[..., :geom.slots].reshape(b * nh, geom.h, geom.w, geom.slots)
    out = fused_window_av(a_win, v, geom)
    if use_pool:
        a_pool = attn[..., geom.slots:].reshape(b * nh, hw, -1)
        out = out + (a_pool @ vp).reshape(out.shape)
    y = linear(merge_heads(out, b), params.proj)
    return (y, attn) if return_weights else y


def pfa_forward(x: np.ndarray, params: PfaParams, geom: WindowGeometry,
                pool_bias: Optional[np.ndarray] = None, use_pool: bool = True,
                return_weights: bool = False):
    """Pixel-focused attention on ``x[C, H, W]`` (or a batch ``[B, C, H, W]``).

    Window and pooled similarities are scaled by ``1/sqrt(head_dim)``, biased
    (learnable window bias, optional ``pool_bias[heads, H*W, P]``), masked and
    normalised together before each path aggregates its own values.
    With ``use_pool=False`` only the window path is attended.
    ``return_weights`` also returns the ``[B, heads, H, W, k*k (+P)]`` weights.
    """
    t, batched = to_tokens(x)
    res = pfa_tokens(t, params, geom, pool_bias, use_pool, return_weights)
    if return_weights:
        return from_tokens(res[0], batched), res[1]
    return from_tokens(res, batched)


def pfa_concat_oracle(x: np.ndarray, params: PfaParams, geom: WindowGeometry,
                      pool_bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Reference PFA that concatenates window and pooled keys/values per pixel.

    Builds ``K_concat``/``V_concat`` explicitly for every pixel and runs one
    ordinary masked attention over them. Slow; for verification only.
    """
    t, batched = to_tokens(x)
    _check_input(t, params, geom)
    b, nh, d = t.shape[0], params.heads, params.head_dim
    r = geom.k // 2
    q = linear(t, params.q).reshape(b, geom.h, geom.w, nh, d)
    k = linear(t, params.k).reshape(b, geom.h, geom.w, nh, d)
    v = linear(t, params.v).reshape(b, geom.h, geom.w, nh, d)
    pooled = activate_and_pool_tokens(t, params.pool_proj, params.pool_norm,
                                      geom.pool_h, geom.pool_w).reshape(b, -1, params.dim)
    kp = linear(pooled, params.k).reshape(b, -1, nh, d)
    vp = linear(pooled, params.v).reshape(b, -1, nh, d)
    n_pool = kp.shape[1]
    bias_pool = (np.zeros((nh, geom.h * geom.w, n_pool), t.dtype) if pool_bias is None
                 else pool_bias)
    out = np.zeros((b, geom.h, geom.w, nh, d), dtype=t.dtype)
    neg = sentinel(t.dtype)
    for bi in range(b):
        for i in range(geom.h):
            for j in range(geom.w):
                kw = np.zeros((geom.slots, nh, d), dtype=t.dtype)
                vw = np.zeros((geom.slots, nh, d), dtype=t.dtype)
                for s in range(geom.slots):
                    ii, jj = i + s // geom.k - r, j + s % geom.k - r
                    if 0 <= ii < geom.h and 0 <= jj < geom.w:
                        kw[s], vw[s] = k[bi, ii, jj], v[bi, ii, jj]
                k_cat = np.concatenate([kw, kp[bi]], axis=0).transpose(1, 0, 2)  # [nh, n, d]
                v_cat = np.concatenate([vw, vp[bi]], axis=0).transpose(1, 0, 2)
                bias = np.concatenate([params.window_bias, bias_pool[:, i * geom.w + j]], axis=-1)
                logits = np.einsum("hd,hnd->hn", q[bi, i, j], k_cat) / np.sqrt(d) + bias
                mask = np.concatenate([geom.mask[i, j], np.zeros(n_pool, bool)])
                logits[:, mask] = neg
                attn = softmax(logits, mask)
                out[bi, i, j] = np.einsum("hn,hnd->hd", attn, v_cat)
    y = linear(out.reshape(b, geom.h, geom.w, params.dim), params.proj)
    return from_tokens(y, batched)
