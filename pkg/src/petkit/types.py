"""Shared data containers: activity/anatomical images are plain 2D float
arrays; sinograms carry one value per line of response plus an active flag."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Sinogram:
    """Per-LOR measurement vector.

    ``values`` may hold counts (nonnegative integers), expected counts, or
    background rates depending on context. ``active`` marks LORs that are
    read out; inactive entries are forced to zero.
    """

    values: np.ndarray
    active: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.active is None:
            self.active = np.ones(self.values.shape, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool).ravel()
        if self.active.shape != self.values.shape:
            raise ValueError(
                f"active mask length {self.active.size} != values length {self.values.size}"
            )
        self.values = np.where(self.active, self.values, 0.0)

    @property
    def n_lors(self) -> int:
        return self.values.size

    def copy(self) -> "Sinogram":
        return Sinogram(self.values.copy(), self.active.copy())


def as_image(x, image_size: int | None = None) -> np.ndarray:
    """Coerce to a 2D float64 image, optionally checking the side length."""
    img = np.asarray(x, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square 2D image, got shape {img.shape}")
    if image_size is not None and img.shape[0] != image_size:
        raise ValueError(f"image side {img.shape[0]} != expected {image_size}")
    return img


def check_activity(x: np.ndarray) -> np.ndarray:
    x = as_image(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("activity image contains non-finite values")
    if np.any(x < 0):
        raise ValueError("activity image contains negative values")
    return x


def fov_mask(image_size: int, voxel_size: float, fov_radius: float) -> np.ndarray:
    """Boolean mask of voxels whose center lies inside the FOV circle."""
    centers = (np.arange(image_size) + 0.5 - image_size / 2.0) * voxel_size
    xx, yy = np.meshgrid(centers, centers, indexing="xy")
    return xx * xx + yy * yy <= fov_radius * fov_radius


def normalize_mean_one(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale an image so its mean over nonzero voxels is 1.0.

    Returns the normalized image and the scale that maps model space back to
    the original intensities (``original = normalized * scale``).
    """
    x = np.asarray(x, dtype=np.float64)
    nz = x != 0
    if not nz.any():
        raise ValueError("cannot normalize an all-zero image")
    scale = float(x[nz].mean())
    if scale == 0.0:
        raise ValueError("nonzero voxels have zero mean")
    return x / scale, scale
