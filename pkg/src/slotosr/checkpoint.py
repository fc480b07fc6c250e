"""Versioned binary checkpoint container.

Layout: 8-byte magic, uint32 format version, uint64 JSON index length, the
JSON index (name -> shape/offset/nbytes), then tightly packed little-endian
float64 blobs.  Round-trips are exact: values are written as raw IEEE bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"SLOTCKPT"
VERSION = 1


def _values(p):
    return p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)


def save(path, params):
    """Write a name -> array mapping. Arrays are stored as little-endian float64."""
    index = {}
    blobs = []
    offset = 0
    for name in sorted(params):
        # note: ascontiguousarray would silently promote 0-d arrays to 1-d
        arr = np.asarray(_values(params[name]), dtype="<f8")
        raw = arr.tobytes(order="C")
        index[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    index_raw = json.dumps(index, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(index_raw)))
        f.write(index_raw)
        for raw in blobs:
            f.write(raw)
    return path


def load(path):
    """Read a checkpoint back into a name -> float64 ndarray dict."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"checkpoint {path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"checkpoint {path}: unsupported version {version}")
        (index_len,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(index_len).decode("utf-8"))
        blob = f.read()
    out = {}
    for name, meta in index.items():
        raw = blob[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(meta["shape"])
        out[name] = arr
    return out


def weights_hash(params, prefix=None):
    """SHA-256 over name-sorted raw values; used to prove a subtree untouched."""
    h = hashlib.sha256()
    for name in sorted(params):
        if prefix is not None and not name.startswith(prefix):
            continue
        arr = np.ascontiguousarray(_values(params[name]), dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()
