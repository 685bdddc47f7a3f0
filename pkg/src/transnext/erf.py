"""Effective receptive field by central finite differences, plus PGM/text export."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .model import Model, forward_features
from .tensor import ConfigError

MAX_SIDE = 64


def probe_value(model: Model, images: np.ndarray, stage: int, channel: int = 0,
                mode: Optional[str] = None) -> np.ndarray:
    """Channel ``channel`` of the centre pixel of ``stage`` (before its closing norm), per image."""
    t = forward_features(model, images, mode, upto=stage, final_norm=False)[-1]
    _, h, w, _ = t.shape
    return t[:, h // 2, w // 2, channel]


def erf_saliency(model: Model, image: np.ndarray, stage: int = -1, channel: int = 0,
                 step: float = 1e-3, mode: Optional[str] = None, batch: int = 256,
                 allow_large: bool = False, normalize: bool = True) -> np.ndarray:
    """``|d probe / d x|`` summed over input channels, as an ``[H, W]`` grid in ``[0, 1]``.

    Every input element is perturbed by ``+-step`` and the probe re-evaluated,
    in batches of ``batch`` images. Inputs larger than 64x64 need ``allow_large``.
    The model should be float64 for meaningful differences.
    """
    x = np.asarray(image, dtype=model.dtype)
    if x.ndim != 3:
        raise ConfigError(f"image must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if max(h, w) > MAX_SIDE and not allow_large:
        raise ConfigError(f"ERF input {h}x{w} exceeds the {MAX_SIDE}x{MAX_SIDE} guard; "
                          "pass allow_large (CLI: --allow-large) to override")
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    stage = stage % model.config.num_stages
    n = c * h * w
    grads = np.empty(n, dtype=np.float64)
    for s in range(0, n, batch):
        idx = np.arange(s, min(n, s + batch))
        plus = np.repeat(x[None], idx.size, axis=0).reshape(idx.size, -1)
        minus = plus.copy()
        plus[np.arange(idx.size), idx] += step
        minus[np.arange(idx.size), idx] -= step
        both = np.concatenate([plus, minus]).reshape(-1, c, h, w)
        vals = probe_value(model, both, stage, channel, mode).astype(np.float64)
        grads[idx] = (vals[:idx.size] - vals[idx.size:]) / (2.0 * step)
    grid = np.abs(grads.reshape(c, h, w)).sum(axis=0)
    if normalize:
        top = grid.max()
        grid = grid / top if top > 0 else grid
    return grid


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary 8-bit greyscale (P5) image of a ``[0, 1]`` grid."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    pix = np.round(g * 255).astype(np.uint8)
    header = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def write_grid_text(path, grid: np.ndarray) -> None:
    rows = [",".join(f"{v:.6f}" for v in row) for row in np.asarray(grid)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
