"""DFB1 binary container for feature arrays and weight archives.

Layout: 8-byte magic "DAMCFB1\\0", a uint32-LE length-prefixed UTF-8 JSON
header, then a row-major little-endian payload. Single-array files carry
{dtype, shape, kind, meta}; archives carry kind="archive" with an ordered
record table and the payloads concatenated in record order. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DAMCFB1\0"

_DTYPES = {
    "f32le": np.dtype("<f4"),
    "f64le": np.dtype("<f8"),
}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32le"
    if arr.dtype == np.float64:
        return "f64le"
    raise ValueError(f"unsupported dtype {arr.dtype}; cast to float32 or float64 first")


def _pack_header(header: dict) -> bytes:
    payload = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(payload)) + payload


def _read_header(f) -> dict:
    magic = f.read(8)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    raw_len = f.read(4)
    if len(raw_len) != 4:
        raise FormatError("truncated header length")
    (n,) = struct.unpack("<I", raw_len)
    raw = f.read(n)
    if len(raw) != n:
        raise FormatError("truncated header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unparseable header: {e}") from e
    if not isinstance(header, dict):
        raise FormatError("header is not a JSON object")
    return header


def _read_payload(f, dtype_tag: str, shape) -> np.ndarray:
    if dtype_tag not in _DTYPES:
        raise FormatError(f"unknown dtype {dtype_tag!r}")
    dt = _DTYPES[dtype_tag]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = f.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise FormatError("truncated payload")
    return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def write_array(path, arr: np.ndarray, kind: str, meta: dict | None = None) -> None:
    """Write a single array with the given kind ("mel", "feat", ...)."""
    arr = np.ascontiguousarray(arr)
    header = {
        "dtype": _dtype_tag(arr),
        "shape": list(arr.shape),
        "kind": kind,
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(_pack_header(header))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_array(path) -> tuple[np.ndarray, dict]:
    """Read a single-array file; returns (array, header)."""
    with open(path, "rb") as f:
        header = _read_header(f)
        if header.get("kind") == "archive":
            raise FormatError("file is an archive, use read_archive")
        for key in ("dtype", "shape"):
            if key not in header:
                raise FormatError(f"header missing {key!r}")
        arr = _read_payload(f, header["dtype"], header["shape"])
    return arr, header


def write_archive(path, records: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write an ordered named-array archive (weights, checkpoints)."""
    arrays = {name: np.ascontiguousarray(a) for name, a in records.items()}
    table = [
        {"name": name, "dtype": _dtype_tag(a), "shape": list(a.shape)}
        for name, a in arrays.items()
    ]
    header = {"kind": "archive", "records": table, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(_pack_header(header))
        for a in arrays.values():
            f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def read_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive; returns (ordered name->array dict, meta)."""
    with open(path, "rb") as f:
        header = _read_header(f)
        if header.get("kind") != "archive":
            raise FormatError("file is not an archive")
        records = {}
        for rec in header.get("records", []):
            records[rec["name"]] = _read_payload(f, rec["dtype"], rec["shape"])
    return records, header.get("meta", {})
