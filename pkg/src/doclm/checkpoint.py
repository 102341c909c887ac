"""Versioned little-endian binary checkpoints keyed by parameter name.

Layout::

    magic    8 bytes  b"DOCLMCK\\0"
    version  u32
    meta     u32 length + UTF-8 JSON (sorted keys)
    count    u32
    entries  count x (u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims, float64 data)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DOCLMCK\0"
VERSION = 1
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=_F64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = 8

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, buf, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (mlen,) = take("<I")
        meta = json.loads(buf[off:off + mlen].decode("utf-8"))
        off += mlen
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (nlen,) = take("<I")
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I") if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(buf, dtype=_F64, count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return arrays, meta


def state_dict(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_state(model, arrays: Mapping[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``model``; the first missing or mis-shaped parameter is fatal."""
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"parameter {name} missing from checkpoint")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
    for name, p in model.named_parameters():
        p.data = np.array(arrays[name], dtype=np.float64, copy=True)
