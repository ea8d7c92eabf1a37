"""Cut-cell lattice domains (half-balls and balls), metric fields, annuli.

The domain is the cube lattice [-r, r]^n with spacing h.  Every node carries
one of four mask codes; quadrature is a weighted node sum with weight
h^n * sqrt(det g).  The spherical boundary is a staircase band of width h/2;
nodes within h/2 of the flat face are snapped onto x_n = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MASK_OUTSIDE = 0
MASK_INTERIOR = 1
MASK_FLAT = 2
MASK_SPHERE = 3

MASK_NAMES = {
    MASK_OUTSIDE: "outside",
    MASK_INTERIOR: "interior",
    MASK_FLAT: "flat_boundary",
    MASK_SPHERE: "spherical_boundary",
}
MASK_CODES = {v: k for k, v in MASK_NAMES.items()}

_SNAP = 1e-12


class GridError(ValueError):
    pass


@dataclass
class HalfBallGrid:
    """Lattice discretization of B(0, r) or the half-ball B(0, r)^+."""

    n: int
    r: float
    h: float
    half: bool
    shape: tuple
    axes: list                      # per-axis node coordinates
    mask: np.ndarray                # (N,) uint8, C-order over the lattice
    _coords: np.ndarray = field(default=None, repr=False)
    _nbr: tuple = field(default=None, repr=False)

    @property
    def num_lattice(self) -> int:
        return int(self.mask.size)

    @property
    def node_count(self) -> int:
        """Number of non-outside nodes."""
        return int(np.count_nonzero(self.mask != MASK_OUTSIDE))

    @property
    def inside(self) -> np.ndarray:
        return self.mask != MASK_OUTSIDE

    @property
    def coords(self) -> np.ndarray:
        """(N, n) node coordinates, C-order over the lattice."""
        if self._coords is None:
            mesh = np.meshgrid(*self.axes, indexing="ij")
            self._coords = np.stack([m.reshape(-1) for m in mesh], axis=1)
        return self._coords

    def radii(self) -> np.ndarray:
        """Euclidean distance of every lattice node from the origin."""
        r2 = np.zeros(self.shape)
        for i, ax in enumerate(self.axes):
            sh = [1] * self.n
            sh[i] = len(ax)
            r2 = r2 + (ax.reshape(sh)) ** 2
        return np.sqrt(r2).reshape(-1)

    def neighbor_tables(self):
        """Per-axis neighbor flat indices and difference scheme codes.

        Returns (nbr_plus, nbr_minus, scheme): each (n, N); indices are
        clamped in-range (scheme code 0 marks nodes without usable scheme).
        """
        if self._nbr is None:
            from .kernels import (SCHEME_BACKWARD, SCHEME_CENTERED,
                                  SCHEME_FORWARD, SCHEME_NONE)
            shape = self.shape
            size = self.num_lattice
            inside = (self.mask != MASK_OUTSIDE).reshape(shape)
            strides = np.array([int(np.prod(shape[i + 1:], dtype=np.int64))
                                for i in range(self.n)], dtype=np.int64)
            idx = np.arange(size, dtype=np.int64).reshape(shape)
            nbr_plus = np.empty((self.n, size), dtype=np.int64)
            nbr_minus = np.empty((self.n, size), dtype=np.int64)
            scheme = np.zeros((self.n, size), dtype=np.uint8)
            for i in range(self.n):
                has_p = np.zeros(shape, dtype=bool)
                has_m = np.zeros(shape, dtype=bool)
                sl_all = [slice(None)] * self.n
                sl_lo = list(sl_all); sl_lo[i] = slice(None, -1)
                sl_hi = list(sl_all); sl_hi[i] = slice(1, None)
                has_p[tuple(sl_lo)] = inside[tuple(sl_hi)]
                has_m[tuple(sl_hi)] = inside[tuple(sl_lo)]
                ip = np.minimum(idx + strides[i], size - 1)
                im = np.maximum(idx - strides[i], 0)
                nbr_plus[i] = np.where(has_p, ip, idx).reshape(-1)
                nbr_minus[i] = np.where(has_m, im, idx).reshape(-1)
                sc = np.full(shape, SCHEME_NONE, dtype=np.uint8)
                sc[has_p & has_m] = SCHEME_CENTERED
                sc[has_p & ~has_m] = SCHEME_FORWARD
                sc[~has_p & has_m] = SCHEME_BACKWARD
                sc[~inside] = SCHEME_NONE
                scheme[i] = sc.reshape(-1)
            self._nbr = (nbr_plus, nbr_minus, scheme)
        return self._nbr

    def quad_weights(self) -> np.ndarray:
        """Volume weights h^n * (cell fraction inside the domain) on
        non-outside nodes.

        Spherical-band cells straddling |x| = r are weighted by the radial
        inside fraction, flat-face cells (half grids) by 1/2; interior cells
        get the full h^n.  Without the fractions the staircase rim loses a
        few percent of any boundary-concentrated energy.
        """
        frac = np.clip(0.5 + (self.r - self.radii()) / self.h, 0.0, 1.0)
        if self.half:
            frac[self.mask == MASK_FLAT] *= 0.5
        w = np.where(self.mask != MASK_OUTSIDE, self.h ** self.n * frac, 0.0)
        return w

    def descriptor(self) -> str:
        return f"{self.n} {self.r!r} {self.h!r} {int(self.half)}"


def make_grid(n: int, r: float, h: float, half: bool) -> HalfBallGrid:
    """Build the lattice grid with node masks.  Deterministic in its inputs."""
    if n < 2:
        raise GridError(f"dimension must be >= 2, got {n}")
    if not (0 < h <= r / 2):
        raise GridError(f"spacing must satisfy 0 < h <= r/2, got h={h}, r={r}")
    m = int(math.floor(r / h + _SNAP))
    axis = (np.arange(2 * m + 1) - m) * h
    axes = [axis.copy() for _ in range(n)]
    shape = tuple(len(ax) for ax in axes)

    r2 = np.zeros(shape)
    for i in range(n):
        sh = [1] * n
        sh[i] = shape[i]
        r2 = r2 + axes[i].reshape(sh) ** 2
    dist = np.sqrt(r2)

    xn = axes[-1].reshape([1] * (n - 1) + [shape[-1]])
    xn = np.broadcast_to(xn, shape)
    # nodes within h/2 of the flat face count as snapped onto it
    on_face = np.abs(xn) <= h / 2 + _SNAP

    mask = np.full(shape, MASK_OUTSIDE, dtype=np.uint8)
    # keep every node whose cell intersects the ball (rim band of width h)
    inside_ball = dist <= r + h / 2 + _SNAP
    if half:
        kept = inside_ball & ((xn > 0) | on_face)
    else:
        kept = inside_ball
    sphere_band = dist >= r - h / 2 - _SNAP
    mask[kept & ~sphere_band] = MASK_INTERIOR
    mask[kept & sphere_band] = MASK_SPHERE
    if half:
        flat = kept & on_face & (dist < r - _SNAP)
        mask[flat] = MASK_FLAT
    return HalfBallGrid(n=n, r=float(r), h=float(h), half=bool(half),
                        shape=shape, axes=axes, mask=mask.reshape(-1))


# ---------------------------------------------------------------------------
# metric fields
# ---------------------------------------------------------------------------

class MetricError(ValueError):
    pass


@dataclass
class MetricField:
    """SPD matrix per node with volume element sqrt(det g).

    The Euclidean metric is represented implicitly (``g is None``) so that
    large grids carry no matrix storage.
    """

    grid: HalfBallGrid
    g: np.ndarray = None            # (N, n, n) or None for Euclidean
    ginv: np.ndarray = None
    sqrt_det: np.ndarray = None     # (N,) or None for Euclidean

    @property
    def euclidean(self) -> bool:
        return self.g is None

    @classmethod
    def make_euclidean(cls, grid: HalfBallGrid) -> "MetricField":
        return cls(grid=grid)

    @classmethod
    def from_matrices(cls, grid: HalfBallGrid, g: np.ndarray,
                      check: bool = True) -> "MetricField":
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (grid.num_lattice, grid.n, grid.n):
            raise MetricError(f"bad metric shape {g.shape}")
        inside = grid.inside
        if check:
            sym_err = np.max(np.abs(g[inside] - np.swapaxes(g[inside], 1, 2)))
            if sym_err > 1e-10:
                raise MetricError(f"metric not symmetric (defect {sym_err:g})")
            eig = np.linalg.eigvalsh(g[inside])
            if eig.min() <= 0:
                raise MetricError(f"metric not SPD (min eigenvalue {eig.min():g})")
        ginv = np.zeros_like(g)
        sqrt_det = np.zeros(grid.num_lattice)
        ginv[inside] = np.linalg.inv(g[inside])
        sqrt_det[inside] = np.sqrt(np.linalg.det(g[inside]))
        # keep identity on outside rows so downstream kernels stay regular
        eye = np.eye(grid.n)
        g[~inside] = eye
        ginv[~inside] = eye
        sqrt_det[~inside] = 1.0
        return cls(grid=grid, g=g, ginv=ginv, sqrt_det=sqrt_det)

    @classmethod
    def from_function(cls, grid: HalfBallGrid, fn) -> "MetricField":
        """fn maps a (N, n) coordinate array to (N, n, n) matrices."""
        return cls.from_matrices(grid, fn(grid.coords))

    def weights(self) -> np.ndarray:
        """Quadrature weights h^n * sqrt(det g), zero on outside nodes."""
        w = self.grid.quad_weights()
        if self.sqrt_det is not None:
            w = w * self.sqrt_det
        return w

    def check_spd(self) -> bool:
        if self.euclidean:
            return True
        inside = self.grid.inside
        sym = np.max(np.abs(self.g[inside] - np.swapaxes(self.g[inside], 1, 2)))
        eig = np.linalg.eigvalsh(self.g[inside])
        return bool(sym <= 1e-10 and eig.min() > 0)


# ---------------------------------------------------------------------------
# annuli
# ---------------------------------------------------------------------------

@dataclass
class AnnulusSpec:
    """A(x0, R1, R2), optionally clipped to the upper half-space."""

    center: np.ndarray
    r_inner: float
    r_outer: float
    clipped: bool = True

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if not (self.r_inner > 0):
            raise GridError(f"inner radius must be positive, got {self.r_inner}")
        if not (self.r_inner < self.r_outer):
            raise GridError(
                f"need R1 < R2, got R1={self.r_inner}, R2={self.r_outer}")


def annulus_mask(grid: HalfBallGrid, spec: AnnulusSpec) -> np.ndarray:
    """Boolean node mask of R1 <= d(x, x0) < R2 within the grid.

    Distances are Euclidean chart distances.  An annulus that misses the
    grid yields an all-false mask.
    """
    if spec.center.shape != (grid.n,):
        raise GridError(f"center dimension {spec.center.shape} != grid dim {grid.n}")
    diff = grid.coords - spec.center
    dist = np.sqrt(np.einsum("xi,xi->x", diff, diff))
    sel = (dist >= spec.r_inner) & (dist < spec.r_outer) & grid.inside
    if spec.clipped and not grid.half:
        sel &= grid.coords[:, -1] >= -_SNAP
    return sel


def ball_mask(grid: HalfBallGrid, center, radius: float) -> np.ndarray:
    """Boolean node mask of d(x, center) < radius within the grid."""
    center = np.asarray(center, dtype=np.float64)
    diff = grid.coords - center
    dist = np.sqrt(np.einsum("xi,xi->x", diff, diff))
    return (dist < radius) & grid.inside
