"""Analytic parameter and FLOP accountant.

Every module reports multiply-accumulates (``macs``) and other elementwise
operations (``ops``: bias adds, residual adds, normalisation, softmax, GELU).
Totals are reported under two conventions:

* ``mac``:  one multiply-accumulate counts once, ``macs + ops``
* ``flop``: one multiply-accumulate counts twice, ``2 * macs + ops``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .aggregated import relative_coords
from .config import ModelConfig
from .convglu import conv_glu_flops, glu_hidden

CONVENTIONS = ("mac", "flop")
NORM_OPS = 5       # per normalised element
NONLINEAR_OPS = 5  # per softmax or GELU element


def pfa_flops(H: int, W: int, C: int, k: int, P: int) -> int:
    """Pixel-focused attention MACs: ``5HWC^2 + 2PC^2 + 2HWPC + 2HWk^2C`` with ``P = HpWp``."""
    return 5 * H * W * C * C + 2 * P * C * C + 2 * H * W * P * C + 2 * H * W * k * k * C


def aa_flops(H: int, W: int, C: int, k: int, P: int) -> int:
    """Aggregated attention MACs: the pixel-focused cost plus ``HWk^2C`` for positional attention."""
    return pfa_flops(H, W, C, k, P) + H * W * k * k * C


def mhsa_flops(N: int, C: int) -> int:
    return 4 * N * C * C + 2 * N * N * C


@dataclass
class Row:
    module: str
    params: int = 0
    macs: int = 0
    ops: int = 0

    def total(self, convention: str = "mac") -> int:
        if convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
        return (2 if convention == "flop" else 1) * self.macs + self.ops


@dataclass
class FlopReport:
    config: ModelConfig
    height: int
    width: int
    mode: str
    rows: list[Row] = field(default_factory=list)

    def total(self, convention: str = "mac") -> int:
        return sum(r.total(convention) for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    def stage_totals(self, convention: str = "mac") -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            key = r.module.split(".")[0]
            out[key] = out.get(key, 0) + r.total(convention)
        return out


def _linear(n_tokens: int, c_in: int, c_out: int, bias: bool = True) -> tuple[int, int, int]:
    """``(params, macs, ops)`` of a token-wise linear layer."""
    return c_in * c_out + (c_out if bias else 0), n_tokens * c_in * c_out, n_tokens * c_out if bias else 0


def _cpb_cost(h: int, w: int, ph: int, pw: int, heads: int, hidden: int) -> tuple[int, int]:
    u = relative_coords(h, w, ph, pw).table_size
    return u * (2 * hidden + hidden * heads), u * (2 * hidden + hidden)  # macs, bias + relu


def count_flops(config: ModelConfig, H: int, W: Optional[int] = None,
                mode: Optional[str] = None) -> FlopReport:
    """Per-module parameter and operation table for an ``H x W`` input."""
    W = H if W is None else W
    config.check_resolution(H, W)
    mode = mode or config.pool_mode
    rep = FlopReport(config, H, W, mode)
    c_in = config.in_chans
    for i, st in enumerate(config.stages):
        C = st.channels
        heads = st.heads(config.head_dim)
        h, w = config.feature_size(i, H, W)
        n = h * w
        kp = config.patch_sizes[i]
        rep.rows.append(Row(f"stage{i}.embed", params=C * c_in * kp * kp + 3 * C,
                            macs=n * C * c_in * kp * kp, ops=n * C * (1 + NORM_OPS)))
        mixer, mlp, norms = Row(f"stage{i}.mixer"), Row(f"stage{i}.mlp"), Row(f"stage{i}.norm")
        for _ in range(st.blocks):
            if st.mixer in ("A", "P"):
                k = st.window
                ph, pw = config.pool_extent(i, H, W, mode)
                P = ph * pw
                mixer.params += 5 * (C * C + C) + 2 * C + heads * k * k
                core = aa_flops(h, w, C, k, P) if st.mixer == "A" else pfa_flops(h, w, C, k, P)
                mixer.macs += core
                mixer.ops += (4 * n * C + P * C + 2 * P * C             # biases
                              + NONLINEAR_OPS * n * C + NORM_OPS * P * C  # GELU, pooled norm
                              + NONLINEAR_OPS * heads * n * (k * k + P)   # softmax
                              + heads * n * (k * k + P))                  # scale or bias add
                if st.mixer == "A":
                    hid = config.cpb_hidden
                    mixer.params += (C if config.query_embedding else 0) + heads
                    mixer.params += (C * k * k if config.positional_tokens else 0)
                    mixer.params += 2 * hid + hid + hid * heads + heads
                    if not config.positional_tokens:
                        mixer.macs -= n * k * k * C
                    cm, co = _cpb_cost(h, w, ph, pw, heads, hid)
                    mixer.macs += cm
                    mixer.ops += co
                    mixer.ops += 3 * (n + P) * C  # l2 normalisation of q, k, pooled k
            elif st.mixer == "M":
                mixer.params += 4 * (C * C + C) + heads + (C if config.query_embedding else 0)
                mixer.macs += mhsa_flops(n, C)
                mixer.ops += 4 * n * C + 3 * 2 * n * C + (NONLINEAR_OPS + 1) * heads * n * n
            if st.mixer != "I":
                norms.params += 2 * C
                norms.ops += NORM_OPS * n * C + n * C  # pre-norm, residual add
            if st.mlp_ratio > 0:
                hid = glu_hidden(C, st.mlp_ratio)
                mlp.params += 2 * (C * hid + hid) + 10 * hid + hid * C + C
                mlp.macs += conv_glu_flops(C, h, w, st.mlp_ratio, 3, hidden=hid)
                mlp.ops += n * (3 * hid + C) + NONLINEAR_OPS * n * hid + n * hid
                norms.params += 2 * C
                norms.ops += NORM_OPS * n * C + n * C
        norms.params += 2 * C
        norms.ops += NORM_OPS * n * C
        rep.rows += [mixer, mlp, norms]
        c_in = C
    p, m, o = _linear(1, c_in, config.num_classes)
    h, w = config.feature_size(config.num_stages - 1, H, W)
    rep.rows.append(Row("head", params=p, macs=m, ops=o + h * w * c_in))
    return rep


def count_params(config: ModelConfig) -> int:
    """Analytic parameter count; independent of resolution."""
    r = config.train_resolution
    m = config.total_stride
    r = max(m, r // m * m)
    return count_flops(config, r, r).params


def attention_delta(H: int, W: int, C: int, k: int, P: int) -> int:
    return aa_flops(H, W, C, k, P) - pfa_flops(H, W, C, k, P)
