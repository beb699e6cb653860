"""PFM and PNG readers/writers.

PFM layout: ASCII header ``Pf`` (1 channel) or ``PF`` (3 channels), then
``width height``, then a scale whose sign gives the byte order (negative means
little-endian), then float32 rows stored bottom-to-top.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, data: np.ndarray, scale: float = 1.0) -> None:
    """Write a float map, always little-endian."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n{-abs(scale):.6f}\n".encode("ascii"))
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float32 array of shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").rstrip()
        if header == "PF":
            channels = 3
        elif header == "Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = re.match(r"^\s*(\d+)\s+(\d+)\s*$", f.readline().decode("ascii"))
        if dims is None:
            raise ValueError(f"{path}: malformed PFM dimensions")
        w, h = map(int, dims.groups())
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    """8-bit PNG of an image with values in [0, 1]."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[..., 0]
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] from PNG, or raw values from PFM."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path).astype(float)
    return np.asarray(Image.open(path), dtype=float) / 255.0
