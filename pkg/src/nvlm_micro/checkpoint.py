"""Flat named-tensor checkpoints.

Layout, all integers little-endian::

    b"NVCK"  u32 version (=1)  u32 count
    count x { u32 name_len  name (utf-8)  u32 ndim  u64 dim[ndim]  f64 data[prod(dim)] (C order) }

Tensors are written in sorted name order, so equal parameter sets give
byte-identical files.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"NVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(tensors)))
    for name in sorted(tensors):
        t = tensors[name]
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes")
    return out


def save(tensors: Mapping[str, Tensor | np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def load_into(params: Mapping[str, Tensor], path: str | Path, strict: bool = True) -> None:
    """Assign checkpoint values to matching parameters; shapes must agree."""
    data = load(path)
    if strict and set(data) != set(params):
        missing = sorted(set(params) - set(data))
        extra = sorted(set(data) - set(params))
        raise CheckpointError(f"name mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in data.items():
        if name not in params:
            continue
        if arr.shape != params[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape}, parameter {params[name].shape}")
        params[name].assign(arr)
