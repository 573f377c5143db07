"""Toolkit binary formats and PNG export.

Images and sinograms persist in the "PETK" container: magic ``PETK``,
format version (u16), kind tag (u8: 0 = image, 1 = sinogram), then the
payload. Images store height and width as u32 followed by little-endian
float32 values; sinograms store the LOR count as u32, a packed bit array for
the active mask, then the float32 values. All integers are little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .types import Sinogram

MAGIC = b"PETK"
FORMAT_VERSION = 1
KIND_IMAGE = 0
KIND_SINOGRAM = 1


def save_image(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HB", FORMAT_VERSION, KIND_IMAGE))
        f.write(struct.pack("<II", img.shape[0], img.shape[1]))
        f.write(img.astype("<f4").tobytes())


def save_sinogram(path, sino: Sinogram) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HB", FORMAT_VERSION, KIND_SINOGRAM))
        f.write(struct.pack("<I", sino.n_lors))
        f.write(np.packbits(sino.active).tobytes())
        f.write(sino.values.astype("<f4").tobytes())


def _read_header(f, path):
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a PETK file (bad magic {magic!r})")
    version, kind = struct.unpack("<HB", f.read(3))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    return kind


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = _read_header(f, path)
        if kind != KIND_IMAGE:
            raise ValueError(f"{path}: expected an image, found kind {kind}")
        h, w = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * h * w), dtype="<f4")
        if data.size != h * w:
            raise ValueError(f"{path}: truncated image payload")
        return data.reshape(h, w).astype(np.float64)


def load_sinogram(path) -> Sinogram:
    with open(path, "rb") as f:
        kind = _read_header(f, path)
        if kind != KIND_SINOGRAM:
            raise ValueError(f"{path}: expected a sinogram, found kind {kind}")
        (m,) = struct.unpack("<I", f.read(4))
        n_mask_bytes = (m + 7) // 8
        bits = np.frombuffer(f.read(n_mask_bytes), dtype=np.uint8)
        active = np.unpackbits(bits)[:m].astype(bool)
        data = np.frombuffer(f.read(4 * m), dtype="<f4")
        if data.size != m:
            raise ValueError(f"{path}: truncated sinogram payload")
        return Sinogram(data.astype(np.float64), active)


def save_png(path, img: np.ndarray) -> None:
    """8-bit min-max windowed preview of an image."""
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(img)
    Image.fromarray((scaled * 255.0 + 0.5).astype(np.uint8)).save(Path(path))
