"""TNSR tensor files (little-endian float32, versioned header) and 8-bit PNG
previews. TNSR round-trips are bit-exact at float32 precision.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

MAGIC = b"TNSR"
VERSION = 1


def write_tnsr(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_tnsr(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a TNSR file: bad magic {magic!r}")
        version, rank = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported TNSR version {version}")
        dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
        payload = f.read()
    expected = 4 * int(np.prod(dims)) if rank else 4
    if len(payload) != expected:
        raise ValueError("TNSR payload length does not match dims")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_png(path, array: np.ndarray) -> None:
    """Save an (H, W) or (H, W, 3) float array in [0, 1] as 8-bit PNG."""
    a = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    img = (a * 255.0).round().astype(np.uint8)
    Image.fromarray(img).save(path)


def load_png(path) -> np.ndarray:
    """Load a PNG as float64 in [0, 1], (H, W) or (H, W, 3)."""
    img = np.asarray(Image.open(path))
    if img.ndim == 3 and img.shape[2] == 4:
        img = img[..., :3]
    return img.astype(np.float64) / 255.0
