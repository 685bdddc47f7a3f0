"""Self-test suites: every oracle check runnable without pytest.

Each suite returns a short detail string and raises ``AssertionError`` naming
the violated invariant on failure.
"""

from __future__ import annotations

import tempfile
from dataclasses import fields, is_dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import oracles
from .aggregated import (aggregated_attention_forward, init_agg_params, init_mhsa_params,
                         interpolate_bias, log_cpb, mhsa_stage4_forward, relative_coords)
from .archive import load_weights, save_weights
from .config import NAMED, VARIANTS, parse_config_text
from .convglu import VARIANTS as GLU_VARIANTS
from .convglu import conv_ffn_flops, conv_glu_flops, conv_glu_forward, init_convglu_params
from .erf import erf_saliency
from .flops import aa_flops, count_flops, count_params, pfa_flops
from .kernels import (bench, fused_window_av, fused_window_backward,
                      fused_window_qk, naive_window_av, naive_window_qk)
from .model import build_model, forward, parameter_count
from .pfa import init_pfa_params, joint_softmax, pfa_concat_oracle, pfa_forward
from .tensor import matmul
from .window import build_geometry


def scramble(params, rng: np.random.Generator, scale: float = 0.5, skip=("tau",)):
    """Overwrite every array in ``params`` with ``N(0, scale)`` draws so checks are not trivially small."""
    for f in fields(params):
        val = getattr(params, f.name)
        if isinstance(val, np.ndarray) and f.name not in skip:
            setattr(params, f.name, rng.standard_normal(val.shape) * scale)
        elif is_dataclass(val):
            scramble(val, rng, scale, skip)
    return params


def _require(cond: bool, what: str) -> None:
    if not cond:
        raise AssertionError(what)


def suite_matmul() -> str:
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    err = float(np.abs(matmul(a, b) - oracles.matmul_loops(a, b)).max())
    _require(err <= 1e-12, f"matmul vs triple loop: max err {err:.3e}")
    return f"max_err={err:.2e}"


def suite_padding_mask() -> str:
    rng = np.random.default_rng(2)
    geom = build_geometry(6, 6, 3, 2, 2)
    attn = joint_softmax(rng.standard_normal((1, 2, 6, 6, 9)) * 5,
                         rng.standard_normal((1, 2, 6, 6, 4)), geom)
    masked = attn[..., :9][np.broadcast_to(geom.mask, attn[..., :9].shape)]
    _require(np.all(masked == 0.0), "masked slots carry nonzero weight")
    dev = float(np.abs(attn.sum(-1) - 1).max())
    _require(dev <= 1e-6, f"row sums deviate from 1 by {dev:.2e}")
    return f"row_sum_dev={dev:.1e}"


def suite_fused_qk() -> str:
    rng = np.random.default_rng(3)
    for dt in (np.float32, np.float64):
        for (h, w, k) in ((8, 8, 3), (5, 7, 5), (1, 1, 1), (9, 4, 3)):
            geom = build_geometry(h, w, k, 0, 0)
            q, kk = (rng.standard_normal((2, h, w, 5)).astype(dt) for _ in range(2))
            _require(np.array_equal(fused_window_qk(q, kk, geom), naive_window_qk(q, kk, geom)),
                     f"fused QK differs from unfold at {h}x{w} k={k} {np.dtype(dt).name}")
    return "bit-identical"


def suite_fused_av() -> str:
    rng = np.random.default_rng(4)
    for dt in (np.float32, np.float64):
        for (h, w, k) in ((8, 8, 3), (5, 7, 5), (1, 1, 1), (9, 4, 3)):
            geom = build_geometry(h, w, k, 0, 0)
            a = rng.random((2, h, w, k * k)).astype(dt)
            v = rng.standard_normal((2, h, w, 5)).astype(dt)
            _require(np.array_equal(fused_window_av(a, v, geom), naive_window_av(a, v, geom)),
                     f"fused AV differs from unfold at {h}x{w} k={k} {np.dtype(dt).name}")
    return "bit-identical"


def fd_backward_error(seed: int = 5, h: int = 4, w: int = 4, d: int = 3, k: int = 3) -> float:
    """Worst relative error of the fused backward against central differences."""
    rng = np.random.default_rng(seed)
    geom = build_geometry(h, w, k, 0, 0)
    q, kk, v = (rng.standard_normal((1, h, w, d)) for _ in range(3))
    attn = rng.random((1, h, w, k * k))
    gl = np.where(geom.mask[None], 0.0, rng.standard_normal((1, h, w, k * k)))
    go = rng.standard_normal((1, h, w, d))
    valid = ~geom.mask[None]

    def loss(q_, k_, v_, a_):
        lg = fused_window_qk(q_, k_, geom)
        return float(np.sum(np.where(valid, lg, 0.0) * gl) + np.sum(fused_window_av(a_, v_, geom) * go))

    dq, dk, dv, da = fused_window_backward(gl, go, q, kk, v, attn, geom)
    worst = 0.0
    for name, arr, grad in (("q", q, dq), ("k", kk, dk), ("v", v, dv), ("attn", attn, da)):
        args = {"q": q, "k": kk, "v": v, "attn": attn}

        def f(x, name=name):
            args[name] = x
            return loss(args["q"], args["k"], args["v"], args["attn"])

        num = oracles.central_difference(f, arr.copy())
        if name == "attn":
            num = np.where(geom.mask[None], 0.0, num)
            grad = np.where(geom.mask[None], 0.0, grad)
        rel = float(np.abs(grad - num).max() / max(np.abs(num).max(), 1e-12))
        worst = max(worst, rel)
    return worst


def suite_fused_backward() -> str:
    err = max(fd_backward_error(seed) for seed in (5, 6))
    _require(err <= 1e-6, f"fused backward vs finite differences: rel err {err:.2e}")
    return f"max_rel_err={err:.2e}"


def suite_scratch_contract() -> str:
    fused, naive = [], []
    for h in (8, 16, 32, 64):
        fused.append(bench("fused", h, h, 24, 1, 3, 1, warmup=3).scratch_bytes)
        naive.append(bench("naive", h, h, 24, 1, 3, 1, warmup=3).scratch_bytes)
    _require(len(set(fused)) == 1, f"fused scratch varies with H: {fused}")
    ratios = [n / (h * h) for n, h in zip(naive, (8, 16, 32, 64))]
    _require(max(ratios) == min(ratios), f"naive scratch not proportional to H*W: {naive}")
    return f"fused={fused[0]}B naive@64={naive[-1]}B"


def suite_pfa_concat() -> str:
    rng = np.random.default_rng(7)
    worst = 0.0
    for (h, w, k, ph, pw) in ((5, 7, 3, 2, 3), (4, 4, 3, 1, 1), (6, 5, 5, 3, 2)):
        p = scramble(init_pfa_params(rng, 8, 2, k), rng)
        x = rng.standard_normal((8, h, w))
        geom = build_geometry(h, w, k, ph, pw)
        bias = rng.standard_normal((2, h * w, ph * pw))
        worst = max(worst, float(np.abs(pfa_forward(x, p, geom, bias)
                                        - pfa_concat_oracle(x, p, geom, bias)).max()))
    _require(worst <= 1e-12, f"dual-path PFA vs concatenated oracle: {worst:.2e}")
    return f"max_err={worst:.2e}"


def suite_aggregated_oracle() -> str:
    rng = np.random.default_rng(8)
    p = scramble(init_agg_params(rng, 8, 2, 3, cpb_hidden=16), rng)
    x = rng.standard_normal((8, 5, 7))
    err = float(np.abs(aggregated_attention_forward(x, p, build_geometry(5, 7, 3, 2, 3))
                       - oracles.aggregated_attention_loops(x, p, 3, 2, 3)).max())
    _require(err <= 1e-12, f"aggregated attention vs per-pixel oracle: {err:.2e}")
    return f"max_err={err:.2e}"


def degeneracy_error(seed: int = 9, h: int = 5, w: int = 7) -> float:
    rng = np.random.default_rng(seed)
    p = scramble(init_agg_params(rng, 8, 2, 3, cpb_hidden=16), rng)
    p.qe = np.zeros_like(p.qe)
    p.pos_tokens = np.zeros_like(p.pos_tokens)
    geom = build_geometry(h, w, 3, 2, 2)
    bias = log_cpb(relative_coords(h, w, 2, 2), p.cpb_fc1, p.cpb_fc2)
    x = rng.standard_normal((8, h, w))
    aa = aggregated_attention_forward(x, p, geom, normalize=False, scale=1 / np.sqrt(p.head_dim))
    base = init_pfa_params(rng, 8, 2, 3)
    for f in fields(base):
        setattr(base, f.name, getattr(p, f.name))
    return float(np.abs(aa - pfa_forward(x, base, geom, bias)).max())


def suite_degeneracy() -> str:
    err = degeneracy_error()
    _require(err <= 1e-12, f"AA with QE=0, T=0, matched scale differs from PFA by {err:.2e}")
    return f"max_err={err:.2e}"


def suite_mhsa_oracle() -> str:
    rng = np.random.default_rng(10)
    p = scramble(init_mhsa_params(rng, 8, 2), rng)
    x = rng.standard_normal((8, 3, 4))
    err = float(np.abs(mhsa_stage4_forward(x, p) - oracles.mhsa_loops(x, p)).max())
    _require(err <= 1e-12, f"MHSA vs per-query oracle: {err:.2e}")
    return f"max_err={err:.2e}"


def suite_convglu() -> str:
    rng = np.random.default_rng(11)
    worst = 0.0
    for v in GLU_VARIANTS:
        p = scramble(init_convglu_params(rng, 4, 6, variant=v), rng)
        x = rng.standard_normal((4, 5, 6))
        worst = max(worst, float(np.abs(conv_glu_forward(x, p) - oracles.convglu_loops(x, p)).max()))
    _require(worst <= 1e-12, f"ConvGLU variant vs scalar oracle: {worst:.2e}")
    for C in (24, 64, 96):
        for H in (7, 14, 56):
            for R in (2, 4, 8):
                for k in (2, 3, 5):
                    _require(conv_glu_flops(C, H, H, R, k) < conv_ffn_flops(C, H, H, R, k),
                             f"ConvGLU cost not below ConvFFN at C={C} H={H} R={R} k={k}")
    return f"max_err={worst:.2e}"


def suite_accountant() -> str:
    for H, C, k, P in ((56, 48, 3, 49), (14, 192, 5, 4)):
        _require(aa_flops(H, H, C, k, P) - pfa_flops(H, H, C, k, P) == H * H * k * k * C,
                 "AA minus PFA attention cost is not HWk^2C")
    cfg = VARIANTS["micro"]
    _require(count_params(cfg) == parameter_count(build_model(cfg, 0)),
             "parameter accountant disagrees with the tensor walk")
    lin = count_flops(cfg, 448, mode="linear").total() / count_flops(cfg, 224, mode="linear").total()
    _require(3.9 <= lin <= 4.1, f"linear-mode scaling ratio {lin:.3f} outside [3.9, 4.1]")
    return f"linear_ratio={lin:.3f}"


def suite_archive() -> str:
    cfg = NAMED["toy"]
    model = build_model(cfg, 3)
    with tempfile.TemporaryDirectory() as d:
        a, b = Path(d, "a.tnxt"), Path(d, "b.tnxt")
        save_weights(model, a)
        save_weights(load_weights(a, cfg), b)
        _require(a.read_bytes() == b.read_bytes(), "save-load-save is not byte-identical")
        Path(d, "t.tnxt").write_bytes(a.read_bytes()[:-7])
        try:
            load_weights(Path(d, "t.tnxt"), cfg)
        except ValueError:
            pass
        else:
            raise AssertionError("truncated archive was accepted")
    return "round-trip ok"


def suite_config() -> str:
    for name, cfg in VARIANTS.items():
        again = parse_config_text(cfg.to_text())
        _require(again.stages == cfg.stages and again.pool_mode == cfg.pool_mode,
                 f"{name} config does not survive text round-trip")
    _require(VARIANTS["micro"].to_text().startswith("channels=48,96,192,384\nblocks=2,2,15,2\n"),
             "micro config rows differ from the variant table")
    return "variants round-trip"


def suite_modes() -> str:
    cfg = replace(NAMED["toy"], stages=(replace(NAMED["toy"].stages[0], pool=2),))
    model = build_model(cfg, 0, np.float64)
    x = np.random.default_rng(12).standard_normal((3, 16, 16))
    _require(np.array_equal(forward(model, x, "normal"), forward(model, x, "linear")),
             "normal and linear mode differ at the training resolution")
    y = np.random.default_rng(13).standard_normal((3, 24, 24))
    a, b = forward(model, y, "normal"), forward(model, y, "linear")
    _require(np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and not np.array_equal(a, b),
             "modes should diverge (finitely) away from the training resolution")
    return "coincide@16 diverge@24"


def suite_interpolate() -> str:
    rng = np.random.default_rng(14)
    b = rng.standard_normal((2, 4, 5))
    _require(np.array_equal(interpolate_bias(b, 4, 5), b), "identity resize changed the bias")
    up = interpolate_bias(b, 7, 9)
    _require(np.allclose(up[:, [0, -1]][:, :, [0, -1]], b[:, [0, -1]][:, :, [0, -1]], atol=1e-14),
             "corner-aligned resize moved the corners")
    return "ok"


def suite_erf_identity() -> str:
    model = build_model(NAMED["toy-identity"], 0, np.float64)
    g = erf_saliency(model, np.random.default_rng(15).standard_normal((3, 9, 9)))
    _require(g[4, 4] == 1.0 and np.count_nonzero(g) == 1, "identity-mixer ERF is not a delta")
    return "delta"


SUITES: dict[str, Callable[[], str]] = {
    "matmul": suite_matmul,
    "padding_mask": suite_padding_mask,
    "fused_qk": suite_fused_qk,
    "fused_av": suite_fused_av,
    "fused_backward": suite_fused_backward,
    "scratch_contract": suite_scratch_contract,
    "pfa_concat": suite_pfa_concat,
    "aggregated_oracle": suite_aggregated_oracle,
    "degeneracy": suite_degeneracy,
    "mhsa_oracle": suite_mhsa_oracle,
    "convglu": suite_convglu,
    "accountant": suite_accountant,
    "archive": suite_archive,
    "config": suite_config,
    "modes": suite_modes,
    "interpolate": suite_interpolate,
    "erf_identity": suite_erf_identity,
}


def run(names=None, emit=print) -> int:
    """Run suites in order; stop at the first failure. Returns the number passed."""
    passed = 0
    for name in names or SUITES:
        try:
            detail = SUITES[name]()
        except AssertionError as e:
            emit(f"{name},FAIL,{e}")
            raise
        emit(f"{name},PASS,{detail}")
        passed += 1
    return passed
