import struct

import numpy as np
import pytest

from dietfield.container import ContainerError, read_container, write_container


def test_round_trip_exact(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32([1.5]),
               "c": np.zeros((2, 0, 3), np.float32)}
    write_container(tmp_path / "f", b"TEST", 1, {"note": "x"}, tensors)
    header, out = read_container(tmp_path / "f", b"TEST")
    assert header["note"] == "x"
    assert list(out) == ["a", "b", "c"]
    for k in tensors:
        assert out[k].dtype == np.float32
        np.testing.assert_array_equal(out[k], tensors[k])


def test_layout_is_little_endian(tmp_path):
    write_container(tmp_path / "f", b"VITW", 1, {}, {"x": np.float32([1.0])})
    raw = (tmp_path / "f").read_bytes()
    magic, version, n = struct.unpack_from("<4sIQ", raw)
    assert (magic, version) == (b"VITW", 1)
    assert raw[16 + n:] == struct.pack("<f", 1.0)
    assert b'"offset":0' in raw[16:16 + n]


def test_negative_controls(tmp_path):
    path = tmp_path / "f"
    write_container(path, b"TEST", 1, {}, {"x": np.arange(6, dtype=np.float32)})
    raw = path.read_bytes()
    with pytest.raises(ContainerError, match="magic"):
        read_container(path, b"NOPE")
    with pytest.raises(ContainerError, match="version"):
        read_container(path, b"TEST", versions=(2,))
    path.write_bytes(raw[:-4])
    with pytest.raises(ContainerError, match="past end"):
        read_container(path, b"TEST")
    path.write_bytes(raw[:10])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(path, b"TEST")
    path.write_bytes(raw[:16] + b"#" + raw[17:])
    with pytest.raises(ContainerError, match="corrupt"):
        read_container(path, b"TEST")
    with pytest.raises(ContainerError, match="cannot read"):
        read_container(tmp_path / "missing", b"TEST")
