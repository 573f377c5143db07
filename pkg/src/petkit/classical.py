"""Classical EM reconstruction: MLEM/OSEM and one-step-late MAPEM with a
Bowsher anatomical prior.

Subsets interleave the deterministic LOR ordering (subset k holds the active
LORs whose global index is congruent to k modulo n_subsets), which spreads
angular coverage without any view sorting.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import DetectorMask, SystemMatrix
from .simulate import poisson_loglik
from .types import Sinogram

DENOM_FLOOR_FRACTION = 1e-12


@dataclass
class OsemConfig:
    n_subsets: int = 1
    n_iterations: int = 1
    initial_value: float = 1.0

    def __post_init__(self):
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.initial_value <= 0:
            raise ValueError("initial_value must be positive")


@dataclass
class BowsherConfig:
    neighborhood: int = 1  # window radius in voxels
    k_similar: int = 4
    beta: float = 1.0

    def __post_init__(self):
        n_window = (2 * self.neighborhood + 1) ** 2 - 1
        if not 1 <= self.k_similar <= n_window:
            raise ValueError(
                f"k_similar must lie in [1, {n_window}] for window radius "
                f"{self.neighborhood}"
            )
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


def subset_masks(active: np.ndarray, n_subsets: int) -> list[np.ndarray]:
    """Partition the active LOR set by global index modulo n_subsets."""
    idx = np.arange(active.size)
    return [active & (idx % n_subsets == k) for k in range(n_subsets)]


class BowsherWeights:
    """Symmetric voxel-pair weights stored per half-offset.

    ``half_offsets[i] = (dr, dc)`` pairs each voxel (r, c) with
    (r + dr, c + dc); ``weights[i]`` has the shape of the valid slab for
    that offset.
    """

    def __init__(self, shape, half_offsets, weights):
        self.shape = shape
        self.half_offsets = half_offsets
        self.weights = weights

    def prior_value(self, x: np.ndarray) -> float:
        """U(x) = sum over unordered pairs of w_jk (x_j - x_k)^2."""
        total = 0.0
        for (dr, dc), w in zip(self.half_offsets, self.weights):
            a, b = _offset_views(x, dr, dc)
            total += float((w * (a - b) ** 2).sum())
        return total

    def prior_gradient(self, x: np.ndarray) -> np.ndarray:
        """d/dx_j of the ordered-pair penalty (1/2) sum w (x_j - x_k)^2."""
        g = np.zeros_like(x)
        for (dr, dc), w in zip(self.half_offsets, self.weights):
            a_sl, b_sl = _offset_slices(x.shape, dr, dc)
            diff = w * (x[a_sl] - x[b_sl])
            g[a_sl] += 2.0 * diff
            g[b_sl] -= 2.0 * diff
        return g


def _offset_slices(shape, dr, dc):
    h, w = shape
    a_rows = slice(max(0, -dr), min(h, h - dr))
    a_cols = slice(max(0, -dc), min(w, w - dc))
    b_rows = slice(max(0, dr), min(h, h + dr))
    b_cols = slice(max(0, dc), min(w, w + dc))
    return (a_rows, a_cols), (b_rows, b_cols)


def _offset_views(x, dr, dc):
    a_sl, b_sl = _offset_slices(x.shape, dr, dc)
    return x[a_sl], x[b_sl]


def bowsher_weights(x_mr: np.ndarray, cfg: BowsherConfig) -> BowsherWeights:
    """Select, per voxel, the k most MR-similar window neighbors.

    Each voxel votes weight 1 for its k_similar most similar neighbors
    (ties broken by the fixed row-major neighbor ordering); the result is
    symmetrized with max, so a pair is connected if either side selected it.
    """
    x_mr = np.asarray(x_mr, dtype=np.float64)
    h, w = x_mr.shape
    radius = cfg.neighborhood
    offsets = [(dr, dc)
               for dr in range(-radius, radius + 1)
               for dc in range(-radius, radius + 1)
               if (dr, dc) != (0, 0)]

    n_off = len(offsets)
    diffs = np.full((n_off, h, w), np.inf)
    for i, (dr, dc) in enumerate(offsets):
        a_sl, b_sl = _offset_slices(x_mr.shape, dr, dc)
        diffs[i][a_sl] = np.abs(x_mr[a_sl] - x_mr[b_sl])

    order = np.argsort(diffs.reshape(n_off, -1), axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n_off)[:, None], axis=0)
    selected = (rank.reshape(n_off, h, w) < cfg.k_similar) & np.isfinite(diffs)

    half = [(dr, dc) for (dr, dc) in offsets
            if dr > 0 or (dr == 0 and dc > 0)]
    weights = []
    for dr, dc in half:
        i_fwd = offsets.index((dr, dc))
        i_bwd = offsets.index((-dr, -dc))
        a_sl, b_sl = _offset_slices(x_mr.shape, dr, dc)
        fwd = selected[i_fwd][a_sl]
        bwd = selected[i_bwd][b_sl]
        weights.append(np.maximum(fwd, bwd).astype(np.float64))
    return BowsherWeights((h, w), half, weights)


def _em_reconstruct(y: Sinogram, A: SystemMatrix, b: Sinogram,
                    mask: DetectorMask | None, cfg: OsemConfig,
                    beta: float = 0.0,
                    weights: BowsherWeights | None = None,
                    loglik_out: list | None = None,
                    initial: np.ndarray | None = None) -> np.ndarray:
    active = A.lor_active_mask(mask) & y.active
    y_vals = np.where(active, y.values, 0.0)
    b_vals = np.where(active, b.values, 0.0)

    fov = A.geom.fov_mask()
    if y_vals.sum() == 0:
        warnings.warn("all-zero measurement: returning the scaled uniform "
                      "initial image", stacklevel=2)
        x = np.where(fov, cfg.initial_value, 0.0)
        ax_total = float((A.csr @ x.ravel())[active].sum())
        target = max(float(y_vals.sum() - b_vals.sum()), 0.0)
        return x * (target / ax_total if ax_total > 0 else 0.0)

    subsets = subset_masks(active, cfg.n_subsets)
    sens_sub = [
        (A.csr_t @ sub.astype(np.float64)).reshape(fov.shape)
        for sub in subsets
    ]
    sens_max = max(float(s.max()) for s in sens_sub)
    floor = DENOM_FLOOR_FRACTION * sens_max
    clamped = 0

    if initial is None:
        x = np.where(fov, cfg.initial_value, 0.0)
    else:
        x = np.where(fov, np.asarray(initial, dtype=np.float64), 0.0)
        if np.any(x < 0):
            raise ValueError("initial image must be nonnegative")
    for _ in range(cfg.n_iterations):
        for sub, s_sub in zip(subsets, sens_sub):
            ax = A.csr @ x.ravel()
            ybar = np.where(sub, ax + b_vals, 0.0)
            ratio = np.divide(y_vals, ybar, out=np.zeros_like(ybar),
                              where=(ybar > 0) & sub)
            update = (A.csr_t @ ratio).reshape(fov.shape)
            denom = s_sub.copy()
            if beta > 0 and weights is not None:
                denom = denom + (beta / cfg.n_subsets) * weights.prior_gradient(x)
                low = (denom < floor) & (s_sub > 0)
                clamped += int(low.sum())
                denom = np.where(low, floor, denom)
            upd_mask = s_sub > 0
            x = np.where(upd_mask, x * np.divide(
                update, denom, out=np.ones_like(denom), where=upd_mask), x)
            x = np.maximum(x, 0.0)
        if loglik_out is not None:
            ax = A.csr @ x.ravel()
            loglik_out.append(poisson_loglik(
                Sinogram(np.where(active, y_vals, 0.0), active),
                Sinogram(np.where(active, ax + b_vals, 0.0), active)))
    if clamped:
        warnings.warn(f"MAPEM denominator floored at {clamped} voxel updates",
                      stacklevel=2)
    return x


def osem(y: Sinogram, A: SystemMatrix, b: Sinogram,
         mask: DetectorMask | None, cfg: OsemConfig,
         loglik_out: list | None = None,
         initial: np.ndarray | None = None) -> np.ndarray:
    """Ordered-subset EM. With n_subsets=1 this is exactly MLEM."""
    return _em_reconstruct(y, A, b, mask, cfg, loglik_out=loglik_out,
                           initial=initial)


def mlem(y: Sinogram, A: SystemMatrix, b: Sinogram,
         mask: DetectorMask | None, n_iterations: int,
         loglik_out: list | None = None) -> np.ndarray:
    return osem(y, A, b, mask,
                OsemConfig(n_subsets=1, n_iterations=n_iterations),
                loglik_out=loglik_out)


def mapem_bowsher(y: Sinogram, A: SystemMatrix, b: Sinogram,
                  mask: DetectorMask | None, weights: BowsherWeights,
                  cfg: OsemConfig, beta: float,
                  loglik_out: list | None = None) -> np.ndarray:
    """One-step-late MAP-EM with the quadratic Bowsher penalty."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    return _em_reconstruct(y, A, b, mask, cfg, beta=beta, weights=weights,
                           loglik_out=loglik_out)
