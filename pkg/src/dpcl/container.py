"""Versioned binary checkpoint container.

Layout: 4-byte magic ``DPCC``, little-endian uint32 format version, uint64
JSON-header length, the UTF-8 JSON header, then raw little-endian array blocks
back to back. The header records free-form metadata (model config, layer
shapes) plus one entry per named section giving dtype, shape and byte offset.
Float parameters are stored as float32 regardless of in-memory dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCC"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "int64": "<i8", "uint8": "|u1"}


def _storage_dtype(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "float32"
    if np.issubdtype(arr.dtype, np.unsignedinteger) or arr.dtype == bool:
        return "uint8"
    if np.issubdtype(arr.dtype, np.integer):
        return "int64"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def save_container(path, meta: dict, sections: dict[str, np.ndarray]) -> None:
    """Write metadata plus named arrays to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in sections.items():
        a = np.ascontiguousarray(arr)
        sdtype = _storage_dtype(a)
        blob = a.astype(_DTYPES[sdtype]).tobytes()
        entries.append({
            "name": name,
            "dtype": sdtype,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "sections": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container; returns (meta, {section name: array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint container")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16 : 16 + hlen].decode())
    base = 16 + hlen
    sections = {}
    for e in header["sections"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        sections[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header["meta"], sections
