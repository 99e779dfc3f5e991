"""Checkpoint container.

Layout::

    b"VRCK" | u32 version (=1) | u32 header length | JSON header | blobs

The header lists ``{"name", "shape", "dtype", "offset", "nbytes"}`` per entry
in blob order (offsets relative to the first blob byte) plus a free-form
``meta`` object. Blobs are little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadMagicError, ClipFormatError, TruncatedFileError

MAGIC = b"VRCK"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "float32",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ClipFormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise TruncatedFileError(f"{path}: expected {12 + hlen} header bytes, got {len(raw)}")
    header = json.loads(raw[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(raw):
            raise TruncatedFileError(f"{path}: tensor {e['name']} needs {end} bytes, file has {len(raw)}")
        arrays[e["name"]] = np.frombuffer(raw[start:end], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return arrays, header.get("meta", {})
