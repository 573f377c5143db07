"""Synthetic phantom generation and Poisson measurement simulation.

Phantoms are nested-ellipse "brains": an outer cortex ellipse with an inner
white-matter core, optional hot lesions, and a low-uptake background inside
the FOV. Activity and anatomy share one region label map, so tissue
boundaries coincide exactly between the two images while the per-region
contrasts are drawn independently (PET contrast != MR contrast).

All randomness goes through ``numpy.random.default_rng`` (PCG64), so every
example is reproducible across platforms from its integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DetectorMask, SystemMatrix
from .types import Sinogram, check_activity

LABEL_OUTSIDE = 0
LABEL_BACKGROUND = 1
LABEL_GRAY = 2
LABEL_WHITE = 3
LABEL_LESION0 = 4


@dataclass
class PhantomDomain:
    """Parameter ranges defining one phantom population.

    Uptake ratios are (gray : white : background-analog); the background is
    the non-brain tissue inside the FOV. ``mr_bands`` maps each region to the
    interval its synthetic MR intensity is drawn from, independent of the
    PET uptake. ``seed_offset`` is folded into every per-phantom seed so two
    domains with identical ranges still produce distinct populations.
    """

    gray_uptake: float = 4.0
    white_uptake: float = 1.0
    background_uptake: float = 0.15
    anatomy_scale: tuple[float, float] = (0.78, 0.92)
    eccentricity: tuple[float, float] = (0.7, 0.9)
    lesion_count: tuple[int, int] = (0, 0)
    lesion_contrast: tuple[float, float] = (0.5, 1.0)
    lesion_radius: tuple[float, float] = (0.08, 0.14)
    mr_bands: dict = field(default_factory=lambda: {
        "background": (0.06, 0.14),
        "gray": (0.35, 0.50),
        "white": (0.70, 0.90),
        "lesion": (0.55, 0.65),
    })
    seed_offset: int = 0

    def __post_init__(self):
        if self.gray_uptake <= 0 or self.white_uptake <= 0:
            raise ValueError("gray and white uptake ratios must be positive")
        if self.background_uptake < 0:
            raise ValueError("background uptake must be nonnegative")
        if self.lesion_contrast[0] < 0:
            raise ValueError("lesion contrast must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "gray_uptake": self.gray_uptake,
            "white_uptake": self.white_uptake,
            "background_uptake": self.background_uptake,
            "anatomy_scale": list(self.anatomy_scale),
            "eccentricity": list(self.eccentricity),
            "lesion_count": list(self.lesion_count),
            "lesion_contrast": list(self.lesion_contrast),
            "lesion_radius": list(self.lesion_radius),
            "mr_bands": {k: list(v) for k, v in self.mr_bands.items()},
            "seed_offset": self.seed_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomDomain":
        d = dict(d)
        for key in ("anatomy_scale", "eccentricity", "lesion_count",
                    "lesion_contrast", "lesion_radius"):
            if key in d:
                d[key] = tuple(d[key])
        if "mr_bands" in d:
            d["mr_bands"] = {k: tuple(v) for k, v in d["mr_bands"].items()}
        return cls(**d)


def _inside_ellipse(xx, yy, cx, cy, a, b, theta):
    ct, st = np.cos(theta), np.sin(theta)
    u = (xx - cx) * ct + (yy - cy) * st
    v = -(xx - cx) * st + (yy - cy) * ct
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom_pair(domain: PhantomDomain, seed: int, image_size: int,
                          voxel_size: float = 1.0,
                          fov_radius: float | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Draw one (activity, anatomy) pair on a shared region label map."""
    if fov_radius is None:
        fov_radius = image_size * voxel_size / 2.0
    rng = np.random.default_rng([int(domain.seed_offset), int(seed)])

    centers = (np.arange(image_size) + 0.5 - image_size / 2.0) * voxel_size
    xx, yy = np.meshgrid(centers, centers, indexing="xy")
    in_fov = xx ** 2 + yy ** 2 <= fov_radius ** 2

    # outer cortex ellipse, confined to the FOV
    a = rng.uniform(*domain.anatomy_scale) * fov_radius
    b = a * rng.uniform(*domain.eccentricity)
    theta = rng.uniform(0.0, np.pi)
    jitter = 0.04 * fov_radius
    cx, cy = rng.uniform(-jitter, jitter, size=2)
    outer = _inside_ellipse(xx, yy, cx, cy, a, b, theta)

    # white-matter core
    shrink = rng.uniform(0.52, 0.66)
    wa, wb = a * shrink, b * shrink
    wtheta = theta + rng.uniform(-0.25, 0.25)
    wcx = cx + rng.uniform(-0.05, 0.05) * a
    wcy = cy + rng.uniform(-0.05, 0.05) * b
    white = _inside_ellipse(xx, yy, wcx, wcy, wa, wb, wtheta)

    labels = np.full((image_size, image_size), LABEL_OUTSIDE, dtype=np.int64)
    labels[in_fov] = LABEL_BACKGROUND
    labels[outer & in_fov] = LABEL_GRAY
    labels[white & outer & in_fov] = LABEL_WHITE

    lo, hi = domain.lesion_count
    n_lesions = int(rng.integers(lo, hi + 1)) if hi > lo else int(lo)
    lesion_contrasts = []
    for k in range(n_lesions):
        for _ in range(200):  # rejection-sample a center inside the brain
            lx = rng.uniform(-a, a) + cx
            ly = rng.uniform(-b, b) + cy
            col = int(np.clip((lx / voxel_size + image_size / 2.0), 0,
                              image_size - 1))
            row = int(np.clip((ly / voxel_size + image_size / 2.0), 0,
                              image_size - 1))
            if labels[row, col] in (LABEL_GRAY, LABEL_WHITE):
                break
        radius = rng.uniform(*domain.lesion_radius) * fov_radius
        disc = (xx - lx) ** 2 + (yy - ly) ** 2 <= radius ** 2
        labels[disc & in_fov & (labels >= LABEL_GRAY)] = LABEL_LESION0 + k
        lesion_contrasts.append(rng.uniform(*domain.lesion_contrast))

    act_lut = {
        LABEL_OUTSIDE: 0.0,
        LABEL_BACKGROUND: domain.background_uptake,
        LABEL_GRAY: domain.gray_uptake,
        LABEL_WHITE: domain.white_uptake,
    }
    bands = domain.mr_bands
    mr_lut = {
        LABEL_OUTSIDE: 0.0,
        LABEL_BACKGROUND: rng.uniform(*bands["background"]),
        LABEL_GRAY: rng.uniform(*bands["gray"]),
        LABEL_WHITE: rng.uniform(*bands["white"]),
    }
    for k, contrast in enumerate(lesion_contrasts):
        act_lut[LABEL_LESION0 + k] = domain.gray_uptake * (1.0 + contrast)
        mr_lut[LABEL_LESION0 + k] = rng.uniform(*bands["lesion"])

    activity = np.zeros_like(xx)
    anatomy = np.zeros_like(xx)
    for label, value in act_lut.items():
        activity[labels == label] = value
    for label, value in mr_lut.items():
        anatomy[labels == label] = value
    return activity, anatomy


def simulate_measurements(A: SystemMatrix, x: np.ndarray,
                          mask: DetectorMask | None,
                          mean_true_counts_per_voxel: float,
                          background_fraction: float,
                          seed: int) -> tuple[Sinogram, Sinogram]:
    """Poisson counts from an activity image: y ~ Poisson(A x_scaled + b).

    The activity is rescaled so the expected true counts over active LORs
    equal ``mean_true_counts_per_voxel`` times the number of nonzero voxels;
    the uniform background b carries ``background_fraction`` of the total
    expected counts. Returns the counts y and the exact background b used.
    """
    x = check_activity(x)
    if not np.any(x > 0):
        raise ValueError("empty emission: activity image is identically zero")
    if mean_true_counts_per_voxel <= 0:
        raise ValueError("mean_true_counts_per_voxel must be positive")
    if not 0.0 <= background_fraction < 1.0:
        raise ValueError("background_fraction must lie in [0, 1)")

    active = A.lor_active_mask(mask)
    if not active.any():
        raise ValueError("no active LORs")
    ax = A.csr @ x.ravel()
    true_on_active = float(ax[active].sum())
    if true_on_active <= 0:
        raise ValueError("activity is invisible to every active LOR")

    target_true = mean_true_counts_per_voxel * int(np.count_nonzero(x))
    ax_scaled = ax * (target_true / true_on_active)

    total_b = background_fraction / (1.0 - background_fraction) * target_true
    b_vals = np.where(active, total_b / active.sum(), 0.0)

    lam = np.where(active, ax_scaled + b_vals, 0.0)
    rng = np.random.default_rng(seed)
    y_vals = np.where(active, rng.poisson(lam).astype(np.float64), 0.0)
    return Sinogram(y_vals, active), Sinogram(b_vals, active)


def poisson_loglik(y: Sinogram, ybar: Sinogram) -> float:
    """Poisson log-likelihood sum of y_i log(ybar_i) - ybar_i over active LORs.

    Constant log(y!) terms are omitted and 0 log 0 is taken as 0. Raises if
    an active LOR has a zero expectation but a positive count.
    """
    if not isinstance(y, Sinogram):
        y = Sinogram(np.asarray(y, dtype=np.float64))
    if not isinstance(ybar, Sinogram):
        ybar = Sinogram(np.asarray(ybar, dtype=np.float64),
                        np.ones(np.asarray(ybar).size, dtype=bool))
    if y.n_lors != ybar.n_lors:
        raise ValueError("count and expectation sinograms differ in length")
    active = y.active & ybar.active
    yv = y.values[active]
    mv = ybar.values[active]
    bad = (mv <= 0) & (yv > 0)
    if bad.any():
        raise ValueError("zero expectation with observed count")
    ll = -mv.sum()
    pos = yv > 0
    ll += float((yv[pos] * np.log(mv[pos])).sum())
    return float(ll)
