"""Bit-exact named-tensor archive.

Layout (little-endian): magic ``TNXT``, u32 version, u32 tensor count; per
tensor a u16 name length, UTF-8 name, u8 dtype code (0 f32, 1 f64), u8 rank,
``rank`` u64 extents and the row-major payload. Tensors are stored in sorted
name order so equal contents always give equal bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .config import ModelConfig
from .model import Model, assign_tensors, build_model, named_tensors

MAGIC = b"TNXT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


class ArchiveError(ValueError):
    """Malformed, truncated or mismatched archive."""


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype not in CODES:
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]!r}...")
        code = CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0
    current = "<header>"

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"archive truncated while reading {current} "
                               f"(need {n} bytes at offset {pos}, have {len(view) - pos})")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise ArchiveError("bad magic: not a tensor archive")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    prev = None
    for idx in range(count):
        current = f"tensor #{idx} name"
        (n,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError(f"tensor #{idx}: name is not valid UTF-8") from None
        current = f"tensor {name!r}"
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise ArchiveError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
        payload = take(nbytes)
        if name in out:
            raise ArchiveError(f"tensor {name!r}: duplicate name")
        if prev is not None and name < prev:
            raise ArchiveError(f"tensor {name!r}: names not in sorted order")
        prev = name
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after the last tensor")
    return out


def save_tensors(tensors: dict[str, np.ndarray], path: PathLike) -> None:
    Path(path).write_bytes(encode(tensors))


def load_tensors(path: PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_weights(model: Model, path: PathLike) -> None:
    save_tensors(named_tensors(model), path)


def load_weights(path: PathLike, config: ModelConfig) -> Model:
    """Load an archive into a freshly built model of ``config``; every tensor must match."""
    tensors = load_tensors(path)
    dtypes = {a.dtype for a in tensors.values()}
    if len(dtypes) > 1:
        raise ArchiveError(f"archive mixes dtypes {sorted(map(str, dtypes))}")
    dtype = dtypes.pop() if dtypes else np.float32
    model = build_model(config, seed=0, dtype=dtype)
    try:
        return assign_tensors(model, tensors)
    except ValueError as e:
        raise ArchiveError(str(e)) from None
