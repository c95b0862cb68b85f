"""Deterministic single-file container for named numpy arrays plus a JSON header.

Layout::

    b"SEQV" | u8 version | u64 header length | header JSON (utf-8) | raw array bytes

The header is serialized with sorted keys and fixed separators and array bytes are
little-endian, so ``read -> write`` reproduces the input file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"SEQV"
VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ArchiveError(ValueError):
    """Raised when an archive file is malformed."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in "iub":
        return "i8"
    raise ArchiveError(f"unsupported dtype {arr.dtype}")


def dumps(meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":"), allow_nan=False
    ).encode("utf-8")
    return MAGIC + struct.pack("<BQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ArchiveError("bad magic")
    try:
        version, hlen = struct.unpack("<BQ", blob[4:13])
    except struct.error as exc:
        raise ArchiveError("truncated header") from exc
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    start = 13 + hlen
    try:
        header = json.loads(blob[13:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError("malformed header") from exc
    payload = memoryview(blob)[start:]
    arrays = {}
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise ArchiveError(f"array {entry['name']!r} runs past end of file")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != n:
            raise ArchiveError(f"array {entry['name']!r}: shape does not match byte count")
        arr = np.frombuffer(payload[lo : lo + n], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays


def write(path: str | Path, meta: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def read(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
