"""Image file I/O: PNG via Pillow and a small raw planar format.

Raw planar layout (all integers little-endian)::

    offset 0   4 bytes   magic b"NVRP"
    offset 4   uint32    width
    offset 8   uint32    height
    offset 12  uint32    channels
    offset 16  uint8[channels * height * width]   plane 0 row-major, then plane 1, ...

Pixels are held in memory as floats in [0, 1] (byte value / 255).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .tiler import Image

RAW_MAGIC = b"NVRP"
_HEADER = struct.Struct("<4sIII")


def encode_raw(image: Image) -> bytes:
    planes = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8).transpose(2, 0, 1)
    return _HEADER.pack(RAW_MAGIC, image.width, image.height, image.channels) + planes.tobytes()


def decode_raw(buf: bytes) -> Image:
    if len(buf) < _HEADER.size:
        raise ValueError("raw image truncated")
    magic, w, h, c = _HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise ValueError("not a raw planar image (bad magic)")
    body = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size)
    if body.size != w * h * c:
        raise ValueError(f"raw image body has {body.size} bytes, expected {w * h * c}")
    return Image(body.reshape(c, h, w).transpose(1, 2, 0) / 255.0)


def read_image(path: str | Path) -> Image:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == RAW_MAGIC:
        return decode_raw(data)
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0)


def write_image(image: Image, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        PILImage.fromarray(arr).save(path)
    else:
        path.write_bytes(encode_raw(image))
