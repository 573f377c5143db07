"""Ring-detector geometry, LOR enumeration, and the sparse system matrix.

The projector computes exact chord lengths of each line of response (LOR)
through the voxel grid, so the forward/back projection pair is an exact
adjoint. LORs are unbinned detector pairs; disabling detectors removes every
LOR touching them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .types import Sinogram, check_activity, fov_mask

# Chords whose intersection with the FOV circle is shorter than this fraction
# of a voxel are treated as missing the FOV entirely.
CHORD_TOL_FRACTION = 1e-9


@dataclass(frozen=True)
class RingGeometry:
    """Scanner ring with evenly spaced detectors around a square voxel grid.

    Detector ``i`` sits at angle ``2*pi*i/n_detectors`` on a circle of radius
    ``ring_radius``. The reconstruction FOV is the circle of radius
    ``fov_radius`` centered on the grid (defaults to the inscribed circle).
    """

    n_detectors: int
    ring_radius: float
    image_size: int
    voxel_size: float
    fov_radius: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.n_detectors < 8 or self.n_detectors % 2 != 0:
            raise ValueError("n_detectors must be an even integer >= 8")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.fov_radius is None:
            object.__setattr__(
                self, "fov_radius", self.image_size * self.voxel_size / 2.0
            )
        if not (self.ring_radius > self.fov_radius > 0):
            raise ValueError("need ring_radius > fov_radius > 0")

    @property
    def n_voxels(self) -> int:
        return self.image_size * self.image_size

    def detector_positions(self) -> np.ndarray:
        """(n_detectors, 2) array of detector (x, y) coordinates."""
        angles = 2.0 * np.pi * np.arange(self.n_detectors) / self.n_detectors
        return np.column_stack([self.ring_radius * np.cos(angles),
                                self.ring_radius * np.sin(angles)])

    def fov_mask(self) -> np.ndarray:
        return fov_mask(self.image_size, self.voxel_size, self.fov_radius)

    def to_dict(self) -> dict:
        return {
            "n_detectors": self.n_detectors,
            "ring_radius": self.ring_radius,
            "image_size": self.image_size,
            "voxel_size": self.voxel_size,
            "fov_radius": self.fov_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RingGeometry":
        return cls(**d)


@dataclass
class DetectorMask:
    """Per-detector on/off flags. A LOR is active iff both detectors are."""

    active: np.ndarray

    def __post_init__(self):
        self.active = np.asarray(self.active, dtype=bool).ravel()
        if self.active.sum() < 2:
            raise ValueError("at least 2 detectors must be active")

    @classmethod
    def full(cls, n_detectors: int) -> "DetectorMask":
        return cls(np.ones(n_detectors, dtype=bool))

    @classmethod
    def arc_disabled(cls, n_detectors: int, fraction: float,
                     start: int = 0) -> "DetectorMask":
        """Disable a contiguous arc of ``round(fraction * n)`` detectors."""
        n_off = int(round(fraction * n_detectors))
        active = np.ones(n_detectors, dtype=bool)
        if n_off > 0:
            idx = (start + np.arange(n_off)) % n_detectors
            active[idx] = False
        return cls(active)

    @classmethod
    def random_disabled(cls, n_detectors: int, fraction: float,
                        seed: int) -> "DetectorMask":
        """Disable ``round(fraction * n)`` detectors chosen uniformly."""
        n_off = int(round(fraction * n_detectors))
        rng = np.random.default_rng(seed)
        active = np.ones(n_detectors, dtype=bool)
        if n_off > 0:
            active[rng.choice(n_detectors, size=n_off, replace=False)] = False
        return cls(active)


def chord_circle_length(p0: np.ndarray, p1: np.ndarray, radius: float) -> float:
    """Length of the segment p0->p1 inside the circle of given radius.

    Both endpoints are assumed outside the circle (detectors on the ring),
    so the intersection, when nonempty, is a single interior chord.
    """
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    norm = float(np.hypot(d[0], d[1]))
    if norm == 0.0:
        return 0.0
    # distance from origin to the infinite line through p0, p1
    dist = abs(d[0] * p0[1] - d[1] * p0[0]) / norm
    if dist >= radius:
        return 0.0
    return 2.0 * float(np.sqrt(radius * radius - dist * dist))


def enumerate_lors(geom: RingGeometry) -> np.ndarray:
    """All detector pairs (i, j), i < j, whose chord crosses the FOV circle.

    Ordering is lexicographic on (i, j) and defines the sinogram layout.
    """
    pos = geom.detector_positions()
    tol = CHORD_TOL_FRACTION * geom.voxel_size
    pairs = []
    for i in range(geom.n_detectors - 1):
        for j in range(i + 1, geom.n_detectors):
            if chord_circle_length(pos[i], pos[j], geom.fov_radius) >= tol:
                pairs.append((i, j))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def grid_chord_weights(image_size: int, voxel_size: float,
                       p0, p1, fov_radius: float | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-voxel intersection lengths of the segment p0->p1.

    The grid is centered on the origin; voxel (row, col) spans
    ``x in [(col - n/2) vs, (col + 1 - n/2) vs]`` and likewise for y with the
    row index. Voxels whose center lies outside the FOV circle are dropped
    when ``fov_radius`` is given.

    Returns (flat voxel indices, chord lengths), unordered.
    """
    n = image_size
    vs = voxel_size
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    length = float(np.hypot(d[0], d[1]))
    if length == 0.0:
        return np.empty(0, dtype=np.int64), np.empty(0)

    lo = -n * vs / 2.0
    hi = n * vs / 2.0

    # slab clipping of the parameter range [0, 1] to the grid bounding box
    a_min, a_max = 0.0, 1.0
    for axis in range(2):
        if d[axis] != 0.0:
            t0 = (lo - p0[axis]) / d[axis]
            t1 = (hi - p0[axis]) / d[axis]
            a_min = max(a_min, min(t0, t1))
            a_max = min(a_max, max(t0, t1))
        elif not (lo <= p0[axis] <= hi):
            return np.empty(0, dtype=np.int64), np.empty(0)
    if a_min >= a_max:
        return np.empty(0, dtype=np.int64), np.empty(0)

    # parameter values where the ray crosses grid lines
    planes = lo + vs * np.arange(n + 1)
    alphas = [np.array([a_min, a_max])]
    for axis in range(2):
        if d[axis] != 0.0:
            a = (planes - p0[axis]) / d[axis]
            alphas.append(a[(a > a_min) & (a < a_max)])
    alpha = np.unique(np.concatenate(alphas))

    seg = np.diff(alpha)
    mids = p0[None, :] + (alpha[:-1] + seg / 2.0)[:, None] * d[None, :]
    cols = np.clip(((mids[:, 0] - lo) / vs).astype(np.int64), 0, n - 1)
    rows = np.clip(((mids[:, 1] - lo) / vs).astype(np.int64), 0, n - 1)
    lengths = seg * length
    keep = lengths > CHORD_TOL_FRACTION * vs
    cols, rows, lengths = cols[keep], rows[keep], lengths[keep]

    if fov_radius is not None:
        centers = (np.arange(n) + 0.5 - n / 2.0) * vs
        inside = (centers[cols] ** 2 + centers[rows] ** 2
                  <= fov_radius * fov_radius)
        cols, rows, lengths = cols[inside], rows[inside], lengths[inside]

    flat = rows * n + cols
    # merge duplicate cells (possible when crossings coincide numerically)
    if flat.size and np.unique(flat).size != flat.size:
        order = np.argsort(flat, kind="stable")
        flat, lengths = flat[order], lengths[order]
        uniq, start = np.unique(flat, return_index=True)
        lengths = np.add.reduceat(lengths, start)
        flat = uniq
    return flat, lengths


class SystemMatrix:
    """Sparse forward projector: rows are LORs, columns are voxels.

    Immutable after construction; safe for concurrent reads.
    """

    def __init__(self, geom: RingGeometry, lors: np.ndarray,
                 matrix: sp.csr_matrix):
        self.geom = geom
        self.lors = lors
        self.csr = matrix
        self.csr_t = matrix.T.tocsr()
        self.n_lors = matrix.shape[0]
        self.n_voxels = matrix.shape[1]

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(voxel indices, weights) of LOR i."""
        sl = slice(self.csr.indptr[i], self.csr.indptr[i + 1])
        return self.csr.indices[sl], self.csr.data[sl]

    def lor_active_mask(self, mask: DetectorMask | None) -> np.ndarray:
        """Boolean per-LOR mask induced by a detector mask."""
        if mask is None:
            return np.ones(self.n_lors, dtype=bool)
        if mask.active.size != self.geom.n_detectors:
            raise ValueError("detector mask length does not match geometry")
        return mask.active[self.lors[:, 0]] & mask.active[self.lors[:, 1]]


def build_system_matrix(geom: RingGeometry) -> SystemMatrix:
    """Assemble the chord-length system matrix for every enumerated LOR."""
    lors = enumerate_lors(geom)
    if lors.shape[0] == 0:
        raise ValueError("empty system: geometry yields no LORs crossing the FOV")
    pos = geom.detector_positions()
    indptr = np.zeros(lors.shape[0] + 1, dtype=np.int64)
    indices: list[np.ndarray] = []
    data: list[np.ndarray] = []
    for k, (i, j) in enumerate(lors):
        cols, weights = grid_chord_weights(
            geom.image_size, geom.voxel_size, pos[i], pos[j],
            fov_radius=geom.fov_radius,
        )
        order = np.argsort(cols, kind="stable")
        indices.append(cols[order])
        data.append(weights[order])
        indptr[k + 1] = indptr[k] + cols.size
    matrix = sp.csr_matrix(
        (np.concatenate(data) if data else np.empty(0),
         np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
         indptr),
        shape=(lors.shape[0], geom.n_voxels),
    )
    return SystemMatrix(geom, lors, matrix)


def forward_project(A: SystemMatrix, x: np.ndarray,
                    mask: DetectorMask | None = None) -> Sinogram:
    """Expected LOR intensities A @ x; masked LORs are zero and inactive."""
    x = check_activity(x)
    if x.size != A.n_voxels:
        raise ValueError(
            f"image has {x.size} voxels, system matrix expects {A.n_voxels}"
        )
    values = A.csr @ x.ravel()
    active = A.lor_active_mask(mask)
    return Sinogram(np.where(active, values, 0.0), active)


def back_project(A: SystemMatrix, s: Sinogram) -> np.ndarray:
    """Adjoint projection A^T s over active LORs, as an image."""
    if s.n_lors != A.n_lors:
        raise ValueError(f"sinogram has {s.n_lors} LORs, expected {A.n_lors}")
    vals = np.where(s.active, s.values, 0.0)
    img = A.csr_t @ vals
    return img.reshape(A.geom.image_size, A.geom.image_size)


def sensitivity_image(A: SystemMatrix,
                      mask: DetectorMask | None = None) -> np.ndarray:
    """Per-voxel total weight over active LORs (the EM preconditioner)."""
    active = A.lor_active_mask(mask)
    return back_project(A, Sinogram(active.astype(np.float64), active))
