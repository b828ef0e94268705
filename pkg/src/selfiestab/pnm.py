"""Binary PGM (P5) and PPM (P6) rasters with 8-bit samples."""

from __future__ import annotations

import os
import re

import numpy as np


class RasterError(ValueError):
    pass


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Return ``(H, W)`` for P5 files and ``(H, W, 3)`` for P6, as uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise RasterError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic, width, height, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise RasterError(f"{path}: unsupported format {magic!r}")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise RasterError(f"{path}: malformed header") from None
    if maxval != 255:
        raise RasterError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    pos += 1  # single whitespace byte after maxval
    n = width * height * channels
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos) if len(data) - pos >= n else None
    if pixels is None:
        raise RasterError(f"{path}: pixel data truncated")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return pixels.reshape(shape).copy()


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise RasterError(f"cannot store an image of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())
