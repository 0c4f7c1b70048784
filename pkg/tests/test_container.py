import json
import struct

import numpy as np
import pytest

from videopure.container import MAGIC, read_container, write_container
from videopure.errors import ContainerFormatError


def roundtrip(tmp_path, records, meta=None):
    path = tmp_path / "t.vpt"
    write_container(path, records, meta=meta)
    return read_container(path)


def test_roundtrip_preserves_values_and_meta(tmp_path):
    rng = np.random.default_rng(0)
    records = {
        "w": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "idx": np.arange(7, dtype=np.int64),
        "empty": np.zeros((0, 2), dtype=np.float32),
    }
    out, meta = roundtrip(tmp_path, records, meta={"note": "hi", "n": 3})
    assert list(out) == ["w", "idx", "empty"]
    for name in records:
        assert out[name].dtype == records[name].dtype
        assert out[name].shape == records[name].shape
        np.testing.assert_array_equal(out[name], records[name])
    assert meta == {"note": "hi", "n": 3}


def test_payload_is_little_endian_concatenation(tmp_path):
    a = np.array([1.5, -2.0], dtype=np.float32)
    b = np.array([3], dtype=np.int64)
    path = tmp_path / "t.vpt"
    write_container(path, {"a": a, "b": b})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    payload = blob[8 + hlen:]
    assert payload == a.astype("<f4").tobytes() + b.astype("<i8").tobytes()
    assert [e["name"] for e in header["records"]] == ["a", "b"]
    assert header["records"][1]["offset"] == a.nbytes


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(ContainerFormatError):
        write_container(tmp_path / "t.vpt", {"x": np.zeros(3, dtype=np.float64)})


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "t.vpt"
    write_container(path, {"x": np.zeros(3, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_read_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.vpt"
    write_container(path, {"x": np.arange(10, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_read_rejects_shape_nbytes_mismatch(tmp_path):
    path = tmp_path / "t.vpt"
    write_container(path, {"x": np.arange(4, dtype=np.float32)})
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen])
    header["records"][0]["shape"] = [5]  # payload still holds 4 elements
    raw = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<I", len(raw)) + raw + blob[8 + hlen:])
    with pytest.raises(ContainerFormatError):
        read_container(path)


def test_failed_write_leaves_no_temp_files(tmp_path):
    class Boom:
        dtype = np.dtype("float32")

    with pytest.raises(Exception):
        write_container(tmp_path / "t.vpt", {"x": np.zeros(2, np.float32), "y": Boom()})
    leftovers = [p for p in tmp_path.iterdir()]
    assert leftovers == []


def test_returned_arrays_are_writable_copies(tmp_path):
    out, _ = roundtrip(tmp_path, {"x": np.arange(3, dtype=np.float32)})
    out["x"][0] = 99.0  # must not raise: reader owns its memory
    assert out["x"][0] == 99.0
