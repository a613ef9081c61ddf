"""Minimal binary netpbm I/O: P5 graymaps for masks, P6 pixmaps for images.

Masks are written with maxval 255 (0 = background, 255 = foreground);
float maps are quantized linearly onto [0, 255].
"""

from __future__ import annotations

import numpy as np


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D array as binary P5. Bool arrays map to {0, 255}; float
    arrays in [0, 1] are linearly quantized."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("P5 payload must be 2-D")
    if values.dtype == bool:
        payload = np.where(values, 255, 0).astype(np.uint8)
    else:
        payload = _quantize(values)
    h, w = payload.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("P6 payload must be H x W x 3")
    payload = _quantize(image)
    h, w = payload.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in text.split())
    width, height, maxval = fields[:3]
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    return width, height


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 file into a uint8 array of shape (H, W)."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P5")
        data = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    return data.reshape(height, width)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into a float64 array in [0, 1] of shape (H, W, 3)."""
    with open(path, "rb") as fh:
        width, height = _read_header(fh, b"P6")
        data = np.frombuffer(fh.read(width * height * 3), dtype=np.uint8)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0
