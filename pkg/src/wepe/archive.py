"""Flat named-tensor archive: JSON header + raw little-endian tensor bytes.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then the
concatenated tensor payload. The header maps tensor name to
{"dtype", "shape", "offset", "nbytes"}, with offsets relative to the start
of the payload section. This is the on-disk checkpoint format for backbones
and adapter checkpoints.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_LEN_FMT = "<Q"
_LEN_SIZE = struct.calcsize(_LEN_FMT)

SUPPORTED_DTYPES = {"float16", "float32", "float64", "int32", "int64", "uint8"}


class ArchiveError(ValueError):
    """Malformed or inconsistent tensor archive."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays to `path` in deterministic (sorted-name) order."""
    entries = {}
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(tensors[name])
        dtype = arr.dtype.name
        if dtype not in SUPPORTED_DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r} for tensor {name!r}")
        nbytes = arr.nbytes
        entries[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": nbytes,
        }
        offset += nbytes
    header = {"version": 1, "tensors": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FMT, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(tensors[name]).tobytes())


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive; returns (name -> array, meta)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw_len = fh.read(_LEN_SIZE)
        if len(raw_len) != _LEN_SIZE:
            raise ArchiveError(f"truncated archive header: {path}")
        (blob_len,) = struct.unpack(_LEN_FMT, raw_len)
        try:
            header = json.loads(fh.read(blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArchiveError(f"unreadable archive header in {path}: {exc}") from exc
        payload = fh.read()
    tensors = {}
    for name, entry in header.get("tensors", {}).items():
        dtype = entry["dtype"]
        if dtype not in SUPPORTED_DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r} for tensor {name!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise ArchiveError(f"truncated payload for tensor {name!r} in {path}")
        arr = np.frombuffer(chunk, dtype=np.dtype(dtype)).reshape(entry["shape"]).copy()
        tensors[name] = arr
    return tensors, header.get("meta", {})
