"""Readers/writers for the on-disk formats: Middlebury .flo, PFM, binary PPM.

Round trips for .flo and PFM are byte-exact on float32 data.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25


class FileFormatError(ValueError):
    pass


def write_flo(path, flow: np.ndarray) -> None:
    """Write an (H, W, 2) flow field to a .flo file."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FileFormatError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(np.float32(FLO_MAGIC).tobytes())
        f.write(np.array([w, h], dtype=np.int32).tobytes())
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = np.frombuffer(f.read(4), dtype=np.float32)[0]
        if magic != np.float32(FLO_MAGIC):
            raise FileFormatError(f"{path}: bad .flo magic {magic!r}")
        w, h = np.frombuffer(f.read(8), dtype=np.int32)
        data = np.frombuffer(f.read(int(w) * int(h) * 8), dtype="<f4")
    return data.reshape(int(h), int(w), 2).copy()


def write_pfm(path, field: np.ndarray) -> None:
    """Write an (H, W) float map as a little-endian grayscale PFM (bottom-up rows)."""
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 2:
        raise FileFormatError(f"PFM grayscale needs (H, W), got {field.shape}")
    h, w = field.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(field[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise FileFormatError(f"{path}: unsupported PFM header {header!r}")
        dims = f.readline().decode("ascii")
        m = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FileFormatError(f"{path}: malformed PFM dims {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii"))
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype)
    return data.reshape(h, w)[::-1].astype(np.float32, copy=True)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) image with values in [0, 1] as binary P6."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FileFormatError(f"image must be (H, W, 3), got {pixels.shape}")
    raw = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image back to float values in [0, 1]."""
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise FileFormatError(f"{path}: not a binary PPM")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    raw = np.frombuffer(data[m.end() : m.end() + w * h * 3], dtype=np.uint8)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval
