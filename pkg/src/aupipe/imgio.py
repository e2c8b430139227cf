"""8-bit RGB raster I/O (PNG and binary PPM)."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image

SUPPORTED = (".png", ".ppm")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PNG or P6 PPM file as an (H, W, 3) uint8 array."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in SUPPORTED:
        raise ValueError(f"unsupported raster format {ext!r}; expected one of {SUPPORTED}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def write_image(path: str | os.PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 raster, got {rgb.shape} {rgb.dtype}")
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in SUPPORTED:
        raise ValueError(f"unsupported raster format {ext!r}; expected one of {SUPPORTED}")
    Image.fromarray(rgb, mode="RGB").save(path)
