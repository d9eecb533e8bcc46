"""Binary PPM/PGM writers and readers.

Dependency-free, bit-exact image files: P6 (RGB) for rendered frames and P5
(grayscale) for report heatmaps. Quantization to 8 bits happens here, at
file-write time only.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_ppm", "read_ppm", "write_pgm", "to_uint8"]


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clip a float image in [0, 1] and quantize to uint8."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM expects an (H, W, 3) image")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError("only 8-bit PPM supported")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3)


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 2:
        raise ValueError("PGM expects an (H, W) image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())
