import struct

import numpy as np
import pytest

from transnext.archive import (ArchiveError, decode, encode, load_tensors, load_weights,
                               save_tensors, save_weights)
from transnext.config import NAMED, VARIANTS, toy_config
from transnext.model import build_model, forward, named_tensors


def test_header_layout():
    data = encode({"b": np.zeros((2, 3), np.float64), "a": np.ones(1, np.float32)})
    assert data[:4] == b"TNXT"
    assert struct.unpack("<II", data[4:12]) == (1, 2)
    assert struct.unpack("<H", data[12:14]) == (1,) and data[14:15] == b"a"
    assert data[15:17] == bytes([0, 1])  # f32, rank 1
    assert struct.unpack("<Q", data[17:25]) == (1,)
    assert np.frombuffer(data[25:29], "<f4")[0] == 1.0


def test_tensor_round_trip_preserves_values_and_dtype(rng):
    t = {"x": rng.standard_normal((3, 4)), "y": rng.standard_normal(5).astype(np.float32),
         "scalar": np.array(2.5)}
    back = decode(encode(t))
    for k in t:
        assert back[k].dtype == t[k].dtype and np.array_equal(back[k], t[k])


def test_model_round_trip_byte_identical(tmp_path):
    cfg = NAMED["toy"]
    model = build_model(cfg, 4)
    a, b = tmp_path / "a.tnxt", tmp_path / "b.tnxt"
    save_weights(model, a)
    loaded = load_weights(a, cfg)
    save_weights(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    x = np.random.default_rng(0).standard_normal((3, 16, 16))
    assert np.array_equal(forward(model, x), forward(loaded, x))


def test_archive_size_matches_parameter_count(tmp_path):
    model = build_model(NAMED["toy"], 0)
    save_weights(model, tmp_path / "w")
    n = sum(a.size for a in named_tensors(model).values())
    assert (tmp_path / "w").stat().st_size > 4 * n


def test_truncated_archive(tmp_path):
    data = encode({"alpha": np.zeros(10), "beta": np.ones(3)})
    for cut in (3, 11, 20, len(data) - 1):
        with pytest.raises(ArchiveError):
            decode(data[:cut])
    with pytest.raises(ArchiveError, match="'beta'"):
        decode(data[:-1])


def test_bad_magic_version_dtype():
    data = bytearray(encode({"w": np.zeros(2, np.float32)}))
    with pytest.raises(ArchiveError, match="magic"):
        decode(b"XXXX" + bytes(data[4:]))
    bad = bytearray(data)
    bad[4] = 9
    with pytest.raises(ArchiveError, match="version"):
        decode(bytes(bad))
    bad = bytearray(data)
    bad[15] = 7
    with pytest.raises(ArchiveError, match="'w'.*dtype"):
        decode(bytes(bad))
    with pytest.raises(ArchiveError, match="trailing"):
        decode(bytes(data) + b"\0")


def test_unsupported_dtype_rejected():
    with pytest.raises(ArchiveError, match="'i'"):
        encode({"i": np.zeros(2, np.int32)})


def test_mismatched_config_names_tensor(tmp_path):
    save_weights(build_model(toy_config(channels=24), 0), tmp_path / "w")
    with pytest.raises(ArchiveError, match=r"'stages\.0\.embed\.weight'"):
        load_weights(tmp_path / "w", toy_config(channels=48))
    t = load_tensors(tmp_path / "w")
    del t["head.bias"]
    save_tensors(t, tmp_path / "v")
    with pytest.raises(ArchiveError, match="'head.bias'"):
        load_weights(tmp_path / "v", toy_config(channels=24))


def test_unsorted_archive_rejected():
    a = encode({"a": np.zeros(1)})
    b = encode({"b": np.zeros(1)})
    swapped = a[:4] + struct.pack("<II", 1, 2) + b[12:] + a[12:]
    with pytest.raises(ArchiveError, match="sorted"):
        decode(swapped)
