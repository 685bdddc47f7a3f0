"""Sliding-window geometry: slot layout, padding mask and effective key counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, ShapeError


@dataclass(frozen=True)
class WindowGeometry:
    """Index sets for a ``k x k`` query-centred window over an ``h x w`` map.

    Slots are enumerated row-major, so slot ``s`` sits at offset
    ``(s // k - k // 2, s % k - k // 2)`` and the centre is slot ``(k*k - 1) // 2``.
    ``mask[i, j, s]`` is True where slot ``s`` of pixel ``(i, j)`` falls outside
    the map. ``n_eff`` counts the keys a query actually sees, window plus pool.
    """

    k: int
    h: int
    w: int
    pool_h: int
    pool_w: int
    mask: np.ndarray
    n_eff: np.ndarray

    @property
    def slots(self) -> int:
        return self.k * self.k

    @property
    def pool_size(self) -> int:
        return self.pool_h * self.pool_w

    @property
    def offsets(self) -> np.ndarray:
        return slot_offsets(self.k)


def slot_offsets(k: int) -> np.ndarray:
    r = k // 2
    s = np.arange(k * k)
    return np.stack([s // k - r, s % k - r], axis=1)


def build_geometry(h: int, w: int, k: int, pool_h: int, pool_w: int) -> WindowGeometry:
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"window extent must be odd and positive, got {k}")
    if h < 1 or w < 1:
        raise ShapeError(f"feature extents must be positive, got ({h}, {w})")
    if not (0 <= pool_h <= h and 0 <= pool_w <= w) or (pool_h == 0) != (pool_w == 0):
        raise ShapeError(f"pool extents ({pool_h}, {pool_w}) invalid for map ({h}, {w})")
    off = slot_offsets(k)
    ii = np.arange(h)[:, None, None] + off[None, None, :, 0]
    jj = np.arange(w)[None, :, None] + off[None, None, :, 1]
    mask = (ii < 0) | (ii >= h) | (jj < 0) | (jj >= w)
    n_eff = k * k + pool_h * pool_w - mask.sum(axis=-1)
    mask.setflags(write=False)
    n_eff.setflags(write=False)
    return WindowGeometry(k=k, h=h, w=w, pool_h=pool_h, pool_w=pool_w, mask=mask, n_eff=n_eff)
