"""Minimal binary PGM (P5) / PPM (P6) reading and writing."""

from __future__ import annotations

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2D uint8 array as binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2D uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def _read_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated header")
        body = line.split(b"#", 1)[0]
        fields.extend(int(tok) for tok in body.split())
    w, h, maxval = fields[:3]
    if maxval > 255:
        raise ValueError("16-bit samples not supported")
    return w, h


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """Read binary PPM into a (3, H, W) uint8 array."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.dtype != np.uint8:
        raise ValueError("write_ppm expects a (3, H, W) uint8 array")
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.transpose(1, 2, 0).tobytes())
