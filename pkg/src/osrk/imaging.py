"""8-bit grayscale rendering and tiled montages for kernels and feature maps."""

from __future__ import annotations

import io
import math
import os

import numpy as np
from PIL import Image

from ._io import atomic_write_bytes


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant image maps to all zeros."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def montage(tiles: np.ndarray, columns: int | None = None, gap: int = 1) -> np.ndarray:
    """Arrange ``(n, h, w)`` tiles row-major in a grid, each min-max scaled on its own."""
    tiles = np.asarray(tiles)
    n, h, w = tiles.shape
    cols = columns or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    out = np.zeros((rows * (h + gap) - gap, cols * (w + gap) - gap), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + gap) : r * (h + gap) + h, c * (w + gap) : c * (w + gap) + w] = to_uint8(tiles[i])
    return out


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG; float input is min-max scaled first."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    atomic_write_bytes(path, png_bytes(image))
