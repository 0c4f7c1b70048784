"""Flat binary tensor container used for datasets, checkpoints, and attack dumps.

Layout:

    bytes 0..3    magic b"VPT1"
    bytes 4..7    header length L, unsigned 32-bit little-endian
    bytes 8..8+L  UTF-8 JSON header
    rest          raw record payloads, little-endian, concatenated

The JSON header is ``{"records": [...], "meta": {...}}`` where each record entry
is ``{"name", "shape", "dtype", "offset", "nbytes"}``.  ``offset`` is relative to
the start of the payload section.  Supported dtypes are "f32" and "i64".

Writes go through a temp file in the same directory followed by os.replace, so
a crashed writer never leaves a truncated container behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import ContainerFormatError, require

MAGIC = b"VPT1"

_DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("int64"): "i64"}


def _dtype_name(arr: np.ndarray) -> str:
    name = _DTYPE_NAMES.get(arr.dtype)
    require(name is not None, ContainerFormatError,
            f"unsupported array dtype {arr.dtype}; use float32 or int64")
    return name


def write_container(path: str | os.PathLike,
                    records: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    """Write named arrays to ``path`` atomically.

    Record order follows the dict's insertion order.  ``meta`` must be
    JSON-serializable and is stored verbatim in the header.
    """
    path = os.fspath(path)
    entries = []
    payloads = []
    offset = 0
    for name, arr in records.items():
        require(isinstance(name, str) and name != "", ContainerFormatError,
                "record names must be non-empty strings")
        arr = np.ascontiguousarray(arr)
        dname = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dname], copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": dname,
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"records": entries, "meta": meta or {}}).encode("utf-8")

    dirname = os.path.dirname(path) or "."
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, prefix=".vpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for raw in payloads:
                fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back into ``(records, meta)``.

    Every record is validated against the payload section; a malformed entry
    raises ContainerFormatError naming the offending record.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    require(len(blob) >= 8, ContainerFormatError, f"{path}: truncated header")
    require(blob[:4] == MAGIC, ContainerFormatError,
            f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    require(8 + hlen <= len(blob), ContainerFormatError,
            f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: header is not valid JSON: {exc}") from exc
    require(isinstance(header, dict) and isinstance(header.get("records"), list),
            ContainerFormatError, f"{path}: header missing record table")

    payload = blob[8 + hlen:]
    out: dict[str, np.ndarray] = {}
    for entry in header["records"]:
        name = entry.get("name", "<unnamed>")
        ctx = f"{path}: record {name!r}"
        for key in ("shape", "dtype", "offset", "nbytes"):
            require(key in entry, ContainerFormatError, f"{ctx}: missing field {key!r}")
        dtype = _DTYPES.get(entry["dtype"])
        require(dtype is not None, ContainerFormatError,
                f"{ctx}: unknown dtype {entry['dtype']!r}")
        shape = entry["shape"]
        require(isinstance(shape, list) and all(isinstance(d, int) and d >= 0 for d in shape),
                ContainerFormatError, f"{ctx}: bad shape {shape!r}")
        off, nbytes = entry["offset"], entry["nbytes"]
        require(isinstance(off, int) and isinstance(nbytes, int) and off >= 0 and nbytes >= 0,
                ContainerFormatError, f"{ctx}: bad offset/nbytes")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        require(nbytes == expected, ContainerFormatError,
                f"{ctx}: nbytes {nbytes} does not match shape {shape} ({expected} expected)")
        require(off + nbytes <= len(payload), ContainerFormatError,
                f"{ctx}: payload range [{off}, {off + nbytes}) outside section of {len(payload)} bytes")
        require(name not in out, ContainerFormatError, f"{ctx}: duplicate record name")
        arr = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize,
                            offset=off).reshape(shape)
        out[name] = arr.copy()  # decouple from the file buffer
    meta = header.get("meta", {})
    require(isinstance(meta, dict), ContainerFormatError, f"{path}: meta must be an object")
    return out, meta
