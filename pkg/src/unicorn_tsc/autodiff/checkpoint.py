"""Binary parameter checkpoints: length-prefixed named float64 tensors.

Layout (all integers little-endian)::

    magic   b"UNTSCKP1"
    u32     number of tensors
    per tensor:
        u32 name length, name bytes (UTF-8)
        u32 ndim, ndim x u64 dims
        prod(dims) x f64 data, row-major

A JSON manifest next to the file records the shapes and model hyperparameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Optional

import numpy as np

MAGIC = b"UNTSCKP1"


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps 0-d shapes, unlike ascontiguousarray
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_tensors(blob: bytes) -> Dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        nbytes = 8 * size
        if pos + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint")
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors: Dict[str, np.ndarray], manifest: Optional[dict] = None) -> None:
    path = Path(path)
    path.write_bytes(encode_tensors(tensors))
    doc = dict(manifest or {})
    doc["tensors"] = {k: list(np.shape(v)) for k, v in tensors.items()}
    manifest_path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path):
    path = Path(path)
    tensors = decode_tensors(path.read_bytes())
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    shapes = manifest.get("tensors")
    if shapes is not None:
        for k, v in tensors.items():
            if list(v.shape) != shapes.get(k):
                raise CheckpointError(f"manifest shape mismatch for {k}")
    return tensors, manifest


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")
