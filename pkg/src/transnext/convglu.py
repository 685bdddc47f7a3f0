"""Convolutional GLU channel mixer and its three ablation orderings."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor import (ConfigError, LinearParams, ShapeError, depthwise_conv3x3, gelu, linear,
                     trunc_normal)

VARIANTS = ("convglu", "type1", "type2", "type3")


@dataclass
class ConvGluParams:
    """``w1`` is the value branch, ``w2`` the gate branch, ``w3`` the output projection."""

    w1: LinearParams
    w2: LinearParams
    dw_weight: np.ndarray  # [hidden, 3, 3]
    dw_bias: np.ndarray    # [hidden]
    w3: LinearParams
    variant: str = "convglu"

    @property
    def hidden(self) -> int:
        return self.w1.out_features


def glu_hidden(dim: int, mlp_ratio: float) -> int:
    """Hidden width ``round(2/3 * ratio * dim)``, at least 1."""
    return max(1, int(round(2.0 * mlp_ratio * dim / 3.0)))


def init_convglu_params(rng: np.random.Generator, dim: int, hidden: int,
                        dtype=np.float64, variant: str = "convglu") -> ConvGluParams:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown ConvGLU variant {variant!r}")

    def lin(n_out, n_in):
        return LinearParams(trunc_normal(rng, (n_out, n_in), dtype=dtype), np.zeros(n_out, dtype))

    return ConvGluParams(
        w1=lin(hidden, dim), w2=lin(hidden, dim),
        dw_weight=trunc_normal(rng, (hidden, 3, 3), dtype=dtype),
        dw_bias=np.zeros(hidden, dtype), w3=lin(dim, hidden), variant=variant)


def _dw(t: np.ndarray, p: ConvGluParams) -> np.ndarray:
    # [B, H, W, C] tokens through the channel-first depthwise conv
    y = depthwise_conv3x3(t.transpose(0, 3, 1, 2), p.dw_weight, p.dw_bias)
    return y.transpose(0, 2, 3, 1)


def convglu_tokens(x: np.ndarray, p: ConvGluParams) -> np.ndarray:
    """Channel mixer on ``[B, H, W, C]`` tokens."""
    if x.shape[-1] != p.w1.in_features:
        raise ShapeError(f"ConvGLU expects {p.w1.in_features} channels, got {x.shape[-1]}")
    value = linear(x, p.w1)
    gate = linear(x, p.w2)
    if p.variant == "convglu":
        mixed = value * gelu(_dw(gate, p))
    elif p.variant == "type1":
        mixed = value * _dw(gelu(gate), p)
    elif p.variant == "type2":
        mixed = _dw(value, p) * gelu(gate)
    elif p.variant == "type3":
        mixed = _dw(value * gelu(gate), p)
    else:
        raise ConfigError(f"unknown ConvGLU variant {p.variant!r}")
    return linear(mixed, p.w3)


def conv_glu_forward(x: np.ndarray, params: ConvGluParams) -> np.ndarray:
    """Apply the mixer to ``x[C, H, W]`` (or ``[B, C, H, W]``)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    t = x[None] if x.ndim == 3 else x
    y = convglu_tokens(t.transpose(0, 2, 3, 1), params).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    return y[0] if x.ndim == 3 else y


def conv_glu_flops(C: int, H: int, W: int, R: float, k: int, hidden: int | None = None) -> int:
    """Multiply-accumulate count ``2RHWC^2 + (2/3)RHWCk^2``.

    With ``hidden`` the ``(2/3)RC`` width is replaced by the realised hidden
    width, giving ``3HWC*hidden + HW*hidden*k^2``. Result is floored to an int.
    """
    if hidden is not None:
        return 3 * H * W * C * hidden + H * W * hidden * k * k
    r = Fraction(R)
    return int(2 * r * H * W * C * C + Fraction(2, 3) * r * H * W * C * k * k)


def conv_ffn_flops(C: int, H: int, W: int, R: float, k: int) -> int:
    """Multiply-accumulate count of a convolutional feed-forward, ``2RHWC^2 + RHWCk^2``."""
    r = Fraction(R)
    return int(2 * r * H * W * C * C + r * H * W * C * k * k)
