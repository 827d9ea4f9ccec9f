"""On-disk formats: 8-bit binary PGM images and DPTH depth maps.

A DPTH file is a 16-byte header (``b"DPTH"``, u32 LE width, u32 LE height,
4 reserved zero bytes) followed by little-endian float32 metres, row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError

DEPTH_MAGIC = b"DPTH"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (or uint8) as binary P5 PGM, maxval 255."""
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    Image.fromarray(arr, mode="L").save(Path(path), format="PPM")


def read_pgm(path) -> np.ndarray:
    """Read a PGM image as uint8."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PGM, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h) + b"\0\0\0\0")
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != DEPTH_MAGIC:
        raise DataError(f"{path}: not a DPTH file")
    w, h = struct.unpack_from("<II", raw, 4)
    if len(raw) != 16 + 4 * w * h:
        raise DataError(f"{path}: size does not match {w}x{h} header")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)
