"""Portable float map (linear HDR) and portable pixmap (tone-mapped preview) files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

GAMMA = 2.2


class ImageFormatError(ValueError):
    pass


def write_pfm(path, image) -> None:
    """Little-endian color PFM; rows are stored bottom to top."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1], "<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if not m:
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) != 4 * count:
        raise ImageFormatError(f"{path}: payload is {len(body)} bytes, expected {4 * count}")
    img = np.frombuffer(body, dtype, count).astype(np.float32).reshape(h, w, channels)[::-1]
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return np.ascontiguousarray(img)


def tone_map(image) -> np.ndarray:
    """8-bit preview: ``round(255 * clamp(x, 0, 1)^(1/2.2))``."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(255.0 * x ** (1.0 / GAMMA) + 0.5).astype(np.uint8)


def write_ppm(path, image) -> None:
    img = tone_map(image)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ImageFormatError(f"{path}: not a binary PPM file")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(raw[m.end():], np.uint8, w * h * 3).reshape(h, w, 3)
