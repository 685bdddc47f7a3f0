"""Slow loop-based reference implementations used for verification.

Each oracle recomputes its operator from scalar definitions and shares no
vectorised code path with the library implementation it checks.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .tensor import adaptive_bins


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    out = np.zeros((n, p), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(m):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def _lin(x: np.ndarray, p) -> np.ndarray:
    y = p.weight @ x
    return y + p.bias if p.bias is not None else y


def _ln(x: np.ndarray, p, eps: float = 1e-6) -> np.ndarray:
    mu = sum(x) / x.size
    var = sum((t - mu) ** 2 for t in x) / x.size
    return (x - mu) / math.sqrt(var + eps) * p.gamma + p.beta


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _softmax(z: list[float]) -> list[float]:
    m = max(z)
    e = [math.exp(t - m) for t in z]
    s = sum(e)
    return [t / s for t in e]


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(math.sqrt(float(np.dot(x, x))), 1e-12)


def _pool(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Adaptive average pool of ``a[H, W, C]`` by explicit bucket sums."""
    h, w, c = a.shape
    out = np.zeros((ph, pw, c), dtype=a.dtype)
    for bi, (r0, r1) in enumerate(adaptive_bins(h, ph)):
        for bj, (c0, c1) in enumerate(adaptive_bins(w, pw)):
            out[bi, bj] = a[r0:r1, c0:c1].reshape(-1, c).sum(axis=0) / ((r1 - r0) * (c1 - c0))
    return out


def window_qk_loops(q: np.ndarray, k: np.ndarray, ksize: int) -> np.ndarray:
    """``[heads, H, W, d]`` -> ``[heads, H, W, k*k]``; out-of-map slots are NaN."""
    nh, h, w, d = q.shape
    r = ksize // 2
    out = np.full((nh, h, w, ksize * ksize), np.nan)
    for a in range(nh):
        for i in range(h):
            for j in range(w):
                for s in range(ksize * ksize):
                    ii, jj = i + s // ksize - r, j + s % ksize - r
                    if 0 <= ii < h and 0 <= jj < w:
                        out[a, i, j, s] = sum(float(q[a, i, j, t]) * float(k[a, ii, jj, t])
                                              for t in range(d))
    return out


def window_av_loops(attn: np.ndarray, v: np.ndarray, ksize: int) -> np.ndarray:
    nh, h, w, d = v.shape
    r = ksize // 2
    out = np.zeros((nh, h, w, d))
    for a in range(nh):
        for i in range(h):
            for j in range(w):
                for s in range(ksize * ksize):
                    ii, jj = i + s // ksize - r, j + s % ksize - r
                    if 0 <= ii < h and 0 <= jj < w:
                        out[a, i, j] += float(attn[a, i, j, s]) * v[a, ii, jj].astype(np.float64)
    return out


def aggregated_attention_loops(x: np.ndarray, p, k: int, ph: int, pw: int) -> np.ndarray:
    """Aggregated attention of ``x[C, H, W]`` computed pixel by pixel."""
    c, h, w = x.shape
    nh, d = p.heads, p.head_dim
    t = x.transpose(1, 2, 0)
    q = np.array([[_lin(t[i, j], p.q) for j in range(w)] for i in range(h)])
    kk = np.array([[_lin(t[i, j], p.k) for j in range(w)] for i in range(h)])
    v = np.array([[_lin(t[i, j], p.v) for j in range(w)] for i in range(h)])
    act = np.array([[[_gelu(z) for z in _lin(t[i, j], p.pool_proj)] for j in range(w)]
                    for i in range(h)])
    pooled = _pool(act, ph, pw).reshape(-1, c)
    pooled = np.array([_ln(z, p.pool_norm) for z in pooled])
    kp = np.array([_lin(z, p.k) for z in pooled])
    vp = np.array([_lin(z, p.v) for z in pooled])
    rows = [(r0 + r1 - 1) / 2.0 for r0, r1 in adaptive_bins(h, ph)]
    cols = [(c0 + c1 - 1) / 2.0 for c0, c1 in adaptive_bins(w, pw)]

    def logspace(delta):
        return math.copysign(math.log2(1.0 + abs(delta)), delta) / 3.0

    def cpb(dy, dx):
        hidden = np.maximum(p.cpb_fc1.weight @ np.array([logspace(dy), logspace(dx)])
                            + p.cpb_fc1.bias, 0.0)
        return p.cpb_fc2.weight @ hidden + p.cpb_fc2.bias

    r = k // 2
    out = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            slots = [(s, i + s // k - r, j + s % k - r) for s in range(k * k)]
            valid = [(s, ii, jj) for s, ii, jj in slots if 0 <= ii < h and 0 <= jj < w]
            n_eff = len(valid) + ph * pw
            bias_pool = [cpb(i - rows[a // pw], j - cols[a % pw]) for a in range(ph * pw)]
            for hd in range(nh):
                sl = slice(hd * d, (hd + 1) * d)
                qh = _unit(q[i, j, sl])
                qs = qh + (p.qe[hd] if p.qe is not None else 0.0)
                lam = math.log1p(math.exp(float(p.tau[hd]))) * math.log(n_eff)
                logits = [lam * float(np.dot(qs, _unit(kk[ii, jj, sl]))) + p.window_bias[hd, s]
                          for s, ii, jj in valid]
                logits += [lam * float(np.dot(qs, _unit(kp[a, sl]))) + bias_pool[a][hd]
                           for a in range(ph * pw)]
                wts = _softmax(logits)
                acc = np.zeros(d)
                for n_, (s, ii, jj) in enumerate(valid):
                    extra = float(qh @ p.pos_tokens[hd, :, s]) if p.pos_tokens is not None else 0.0
                    acc += (wts[n_] + extra) * v[ii, jj, sl]
                for a in range(ph * pw):
                    acc += wts[len(valid) + a] * vp[a, sl]
                out[i, j, sl] = acc
    y = np.array([[_lin(out[i, j], p.proj) for j in range(w)] for i in range(h)])
    return y.transpose(2, 0, 1)


def mhsa_loops(x: np.ndarray, p) -> np.ndarray:
    """Length-scaled cosine self-attention of ``x[C, H, W]``, query by query."""
    c, h, w = x.shape
    toks = x.reshape(c, -1).T
    n = toks.shape[0]
    nh, d = p.heads, p.head_dim
    q = np.array([_lin(z, p.q) for z in toks])
    k = np.array([_lin(z, p.k) for z in toks])
    v = np.array([_lin(z, p.v) for z in toks])
    out = np.zeros((n, c))
    for hd in range(nh):
        sl = slice(hd * d, (hd + 1) * d)
        lam = math.log1p(math.exp(float(p.tau[hd]))) * math.log(n)
        for i in range(n):
            qs = _unit(q[i, sl]) + (p.qe[hd] if p.qe is not None else 0.0)
            wts = _softmax([lam * float(np.dot(qs, _unit(k[j, sl]))) for j in range(n)])
            out[i, sl] = sum(wts[j] * v[j, sl] for j in range(n))
    y = np.array([_lin(z, p.proj) for z in out])
    return y.T.reshape(c, h, w)


def _dw_loops(t: np.ndarray, filt: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, ch = t.shape
    out = np.zeros_like(t)
    for cc in range(ch):
        for i in range(h):
            for j in range(w):
                s = bias[cc]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            s += filt[cc, di, dj] * t[ii, jj, cc]
                out[i, j, cc] = s
    return out


def convglu_loops(x: np.ndarray, p) -> np.ndarray:
    """ConvGLU (or a Type-1/2/3 ordering) of ``x[C, H, W]`` from scalar definitions."""
    c, h, w = x.shape
    t = x.transpose(1, 2, 0)
    value = np.array([[_lin(t[i, j], p.w1) for j in range(w)] for i in range(h)])
    gate = np.array([[_lin(t[i, j], p.w2) for j in range(w)] for i in range(h)])
    g = np.vectorize(_gelu)

    def dw(z):
        return _dw_loops(z, p.dw_weight, p.dw_bias)

    if p.variant == "convglu":
        mixed = value * g(dw(gate))
    elif p.variant == "type1":
        mixed = value * dw(g(gate))
    elif p.variant == "type2":
        mixed = dw(value) * g(gate)
    else:
        mixed = dw(value * g(gate))
    y = np.array([[_lin(mixed[i, j], p.w3) for j in range(w)] for i in range(h)])
    return y.transpose(2, 0, 1)


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                       eps: float = 1e-6) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one element at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + eps
        fp = f(x)
        flat[idx] = old - eps
        fm = f(x)
        flat[idx] = old
        g.reshape(-1)[idx] = (fp - fm) / (2 * eps)
    return g
