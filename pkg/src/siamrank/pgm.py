"""Binary PGM (P5) reader and writer for grayscale images in [0, 1]."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Load a P5 file as float64 luminance scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5) file")
    try:
        tokens, offset = _tokens(data[2:], 3)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise PGMError(f"{path}: bad PGM header ({exc})") from None
    if not 0 < maxval < 65536:
        raise PGMError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    raster = data[2 + offset:]
    needed = width * height * dtype.itemsize
    if len(raster) < needed:
        raise PGMError(f"{path}: raster truncated ({len(raster)} of {needed} bytes)")
    pixels = np.frombuffer(raster[:needed], dtype=dtype).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def write_pgm(path, image) -> None:
    """Write a [0, 1] image as 8-bit P5 (values are clipped and rounded)."""
    im = np.asarray(image, dtype=np.float64)
    if im.ndim != 2:
        raise PGMError(f"expected a 2-D image, got shape {im.shape}")
    pixels = np.round(np.clip(im, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{im.shape[1]} {im.shape[0]}\n255\n".encode("ascii")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + pixels.tobytes())
    os.replace(tmp, path)


def quantize8(image) -> np.ndarray:
    """Round-trip an image through 8-bit storage without touching disk."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0
