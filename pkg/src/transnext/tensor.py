"""Dense numeric primitives shared by every layer.

Tensors are plain row-major ``numpy.ndarray`` values of dtype float32
(runtime) or float64 (verification). Every function here returns a new
array and never mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

LAYERNORM_EPS = 1e-6
FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor extents do not line up."""


class ConfigError(ValueError):
    """Raised for invalid layer or model configuration."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


@dataclass
class LinearParams:
    """Affine map ``y = x @ weight.T + bias`` with weight of shape [out, in]."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"linear bias {self.bias.shape} does not match out dim {self.weight.shape[0]}"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray


def sentinel(dtype) -> float:
    """Most negative finite value of ``dtype``; stands in for -inf in masks."""
    return float(np.finfo(dtype).min)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes, with leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def linear(x: np.ndarray, params: LinearParams) -> np.ndarray:
    """Apply ``params`` to the last axis of ``x``."""
    if x.shape[-1] != params.in_features:
        raise ShapeError(
            f"linear expects last dim {params.in_features}, got {x.shape[-1]}"
        )
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, params.in_features), params.weight.T)
    if params.bias is not None:
        y = y + params.bias
    return y.reshape(*lead, params.out_features)


def softmax(x: np.ndarray, mask: Optional[np.ndarray] = None, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax.

    ``mask`` marks entries to exclude (True = masked). Masked entries come out
    exactly zero; a row with every entry masked raises :class:`DomainError`.
    """
    if x.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if np.any(np.all(mask, axis=axis)):
            raise DomainError("softmax row is fully masked")
        x = np.where(mask, sentinel(x.dtype), x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    with np.errstate(over="ignore"):
        e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, 0, e).astype(x.dtype, copy=False)
    return e / np.sum(e, axis=axis, keepdims=True)


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float = LAYERNORM_EPS) -> np.ndarray:
    """LayerNorm over the last axis (biased variance)."""
    if x.shape[-1] < 1:
        raise ShapeError("layernorm over an empty channel axis")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gamma + beta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = np.asarray(x)
    if x.dtype not in FLOAT_DTYPES:
        x = x.astype(np.float64)
    t = x.dtype.type
    return t(0.5) * x * (t(1) + erf(x / t(np.sqrt(2.0))))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softplus(x):
    return np.logaddexp(0, x)


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    """Half-open index ranges ``[floor(a*size/out), ceil((a+1)*size/out))``."""
    return [((a * size) // out, -((-(a + 1) * size) // out)) for a in range(out)]


def _pool_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    for a, (lo, hi) in enumerate(adaptive_bins(size, out)):
        m[a, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Adaptive average pooling of ``x[..., C, H, W]`` to ``[..., C, out_h, out_w]``."""
    if x.ndim < 2:
        raise ShapeError(f"adaptive_avg_pool needs spatial axes, got {x.shape}")
    h, w = x.shape[-2:]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ShapeError(f"pool extents ({out_h}, {out_w}) invalid for input ({h}, {w})")
    ph = _pool_matrix(h, out_h, x.dtype)
    pw = _pool_matrix(w, out_w, x.dtype)
    return np.matmul(np.matmul(ph, x), pw.T)


def depthwise_conv3x3(x: np.ndarray, filt: np.ndarray,
                      bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-channel 3x3 cross-correlation of ``x[..., C, H, W]``, zero padding 1."""
    c, h, w = x.shape[-3:]
    if filt.shape != (c, 3, 3):
        raise ShapeError(f"depthwise filter must be ({c}, 3, 3), got {filt.shape}")
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape, dtype=np.result_type(x, filt))
    for di in range(3):
        for dj in range(3):
            out += xp[..., di:di + h, dj:dj + w] * filt[:, di, dj, None, None]
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, filt: np.ndarray, bias: Optional[np.ndarray] = None,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Dense 2-D cross-correlation of ``x[..., Cin, H, W]`` by ``filt[Cout, Cin, k, k]``.

    Lowered to im2col followed by one matmul.
    """
    cout, cin, kh, kw = filt.shape
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {filt.shape}")
    if x.shape[-3] != cin:
        raise ShapeError(f"conv2d expects {cin} input channels, got {x.shape[-3]}")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input ({h}, {w})")
    xp = np.pad(x.reshape(-1, cin, h, w), [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    cols = np.empty((xp.shape[0], ho, wo, cin, kh, kw), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[..., di, dj] = xp[:, :, di:di + stride * ho:stride,
                                   dj:dj + stride * wo:stride].transpose(0, 2, 3, 1)
    y = matmul(cols.reshape(-1, cin * kh * kw), filt.reshape(cout, -1).T)
    if bias is not None:
        y = y + bias
    y = y.reshape(-1, ho, wo, cout).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y).reshape(*lead, cout, ho, wo)


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale each vector along the last axis to unit L2 norm."""
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, eps)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples truncated to +-2 std by resampling."""
    n = int(np.prod(shape))
    z = rng.standard_normal(n, dtype=np.float64 if dtype == np.float64 else np.float32)
    bad = np.flatnonzero(np.abs(z) > 2.0)
    while bad.size:
        z[bad] = rng.standard_normal(bad.size, dtype=z.dtype)
        bad = bad[np.abs(z[bad]) > 2.0]
    return (z * z.dtype.type(std)).astype(dtype, copy=False).reshape(shape)
