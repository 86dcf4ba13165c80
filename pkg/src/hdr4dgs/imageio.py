"""PFM (float HDR) and 8-bit PNG image files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image) -> None:
    """Little-endian colour PFM (scale -1.0), rows stored bottom to top."""
    data = np.asarray(image, dtype="<f4")
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PFM writer expects an (H, W, 3) image, got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=m.end())
    data = data.reshape(h, w, channels)[::-1]
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    return data.astype(np.float32)


def to_uint8(image) -> np.ndarray:
    x = np.asarray(image)
    if x.dtype == np.uint8:
        return x
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image) -> None:
    """Write an (H, W, 3) uint8 image or [0, 1] float image as 8-bit RGB PNG."""
    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    """Returns float64 values in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
