"""Discrete vector-valued maps: gradients, p-energies, weak residuals.

A map stores one vector in R^d per lattice node (zeros on outside nodes).
Energies are quadrature sums density * h^n * sqrt(det g) over non-outside
nodes; the weak residual is the quadrature-exact derivative of that sum with
respect to the nodal values, projected onto the admissible variations of the
free-boundary problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import (MASK_FLAT, MASK_OUTSIDE, MASK_SPHERE, HalfBallGrid,
                       MetricField, ball_mask, make_grid)

BOUNDARY_TOL = 1e-6    # admissibility: | |u|-1 | on the flat face
MAXNORM_TOL = 1e-3     # maximum principle slack


class MapError(ValueError):
    pass


class DegenerateProjectionError(MapError):
    """|u| = 0 at a flat-boundary node; the tangential projection is undefined."""


@dataclass
class DiscreteMap:
    grid: HalfBallGrid
    values: np.ndarray      # (N, d)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.num_lattice:
            raise MapError(f"bad value array shape {self.values.shape}")
        if not np.all(np.isfinite(self.values[self.grid.inside])):
            raise MapError("non-finite values at non-outside nodes")

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "DiscreteMap":
        return DiscreteMap(self.grid, self.values.copy())


def from_function(grid: HalfBallGrid, fn, d: int = None) -> DiscreteMap:
    """Sample fn (vectorized over an (N, n) coordinate array) on the grid.
    Outside-node rows are zeroed, so fn may return garbage there."""
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.asarray(fn(grid.coords), dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    vals = vals.copy()
    vals[~grid.inside] = 0.0
    return DiscreteMap(grid, vals)


def constant_map(grid: HalfBallGrid, vec) -> DiscreteMap:
    vec = np.asarray(vec, dtype=np.float64)
    vals = np.tile(vec, (grid.num_lattice, 1))
    vals[~grid.inside] = 0.0
    return DiscreteMap(grid, vals)


def is_admissible(m: DiscreteMap, tol: float = BOUNDARY_TOL) -> bool:
    """Membership in the constrained class: | |u| - 1 | <= tol on the flat face."""
    flat = m.grid.mask == MASK_FLAT
    if not flat.any():
        return True
    dev = np.abs(np.linalg.norm(m.values[flat], axis=1) - 1.0)
    return bool(dev.max() <= tol)


def renormalize_flat(values: np.ndarray, grid: HalfBallGrid) -> np.ndarray:
    """Project flat-boundary rows onto the unit sphere (in place), return them."""
    flat = grid.mask == MASK_FLAT
    norms = np.linalg.norm(values[flat], axis=1)
    if norms.size and norms.min() < 1e-12:
        raise DegenerateProjectionError("zero value at a flat-boundary node")
    values[flat] /= norms[:, None]
    return values


def gradient(m: DiscreteMap) -> np.ndarray:
    """Finite-difference gradient, (N, n, d): centered where both neighbors
    exist, one-sided otherwise.  Exact on affine data."""
    nbr_p, nbr_m, scheme = m.grid.neighbor_tables()
    return kernels.gradient_op(m.values, nbr_p, nbr_m, scheme, 1.0 / m.grid.h)


@dataclass
class EnergyReport:
    p: float
    total: float
    density: np.ndarray     # (N,) pointwise |du|_g^p, zero on outside nodes

    def resum(self, weights: np.ndarray) -> float:
        return float(np.dot(self.density, weights))


def p_energy(m: DiscreteMap, metric: MetricField, p: float,
             grad: np.ndarray = None) -> EnergyReport:
    """E_p = sum (|du|_g^2)^{p/2} h^n sqrt(det g) over non-outside nodes."""
    if p < 2:
        raise MapError(f"exponent must satisfy p >= 2, got {p}")
    if not metric.check_spd():
        raise MapError("metric is not SPD")
    if grad is None:
        grad = gradient(m)
    e = kernels.energy_density_sq(grad, metric.ginv)
    density = e ** (p / 2.0)
    density[~m.grid.inside] = 0.0
    total = float(np.dot(density, metric.weights()))
    return EnergyReport(p=float(p), total=total, density=density)


def local_energy(m: DiscreteMap, metric: MetricField, p: float,
                 center, radius: float) -> float:
    """p-energy restricted to the open ball B(center, radius)."""
    if radius <= 0:
        return 0.0
    rep = p_energy(m, metric, p)
    sel = ball_mask(m.grid, center, radius)
    return float(np.dot(rep.density[sel], metric.weights()[sel]))


def energy_gradient(m: DiscreteMap, metric: MetricField, p: float,
                    delta: float = 0.0) -> np.ndarray:
    """Derivative of the (optionally regularized) p-energy with respect to the
    nodal values, shape (N, d).  Uses the exact adjoint of the difference
    stencil, so descent on it is descent on the quadrature sum itself."""
    nbr_p, nbr_m, scheme = m.grid.neighbor_tables()
    grad = kernels.gradient_op(m.values, nbr_p, nbr_m, scheme, 1.0 / m.grid.h)
    e = kernels.energy_density_sq(grad, metric.ginv)
    flux = kernels.p_flux(grad, e, p, delta, metric.ginv)
    flux *= metric.weights()[:, None, None]
    return kernels.adjoint_op(flux, nbr_p, nbr_m, scheme, 1.0 / m.grid.h)


def tangential_project(values: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Project vec rows onto the tangent space {phi : phi . u = 0} of u rows."""
    norms = np.linalg.norm(values, axis=1)
    if norms.size and norms.min() < 1e-12:
        raise DegenerateProjectionError("zero value at a flat-boundary node")
    unit = values / norms[:, None]
    return vec - (np.einsum("xc,xc->x", vec, unit))[:, None] * unit


def weak_residual(m: DiscreteMap, metric: MetricField, p: float,
                  fix_spherical: bool = True):
    """Stationarity defect of the free-boundary problem.

    Returns (residual, norm): the L^2-gradient of E_p (energy gradient divided
    by the node weight), projected tangentially at flat-boundary nodes and
    zeroed where Dirichlet data is held; norm is its weighted l2 norm.
    """
    w = metric.weights()
    G = energy_gradient(m, metric, p)
    res = np.zeros_like(G)
    pos = w > 0
    res[pos] = G[pos] / w[pos, None]
    flat = m.grid.mask == MASK_FLAT
    if flat.any():
        res[flat] = tangential_project(m.values[flat], res[flat])
    if fix_spherical:
        res[m.grid.mask == MASK_SPHERE] = 0.0
    res[~m.grid.inside] = 0.0
    norm = float(np.sqrt(np.einsum("x,xc,xc->", w, res, res)))
    return res, norm


def max_principle_check(m: DiscreteMap, tol: float = MAXNORM_TOL):
    """True iff max |u| <= 1 + tol over non-outside nodes; reports the worst node."""
    norms = np.linalg.norm(m.values, axis=1)
    norms[~m.grid.inside] = 0.0
    worst = int(np.argmax(norms))
    return bool(norms[worst] <= 1.0 + tol), worst, float(norms[worst])


# ---------------------------------------------------------------------------
# map file format
# ---------------------------------------------------------------------------

MAP_MAGIC = "BTLAB-MAP v1"


def write_map(m: DiscreteMap, path) -> None:
    """Bit-exact text format: magic, grid descriptor, one line per
    non-outside node in lexicographic node order."""
    grid = m.grid
    with open(path, "w") as fh:
        fh.write(MAP_MAGIC + "\n")
        fh.write(f"{grid.descriptor()} {m.d}\n")
        from .geometry import MASK_NAMES
        inside_idx = np.flatnonzero(grid.inside)
        multi = np.unravel_index(inside_idx, grid.shape)
        for row, flat_idx in enumerate(inside_idx):
            idx = " ".join(str(int(multi[i][row])) for i in range(grid.n))
            vals = " ".join(repr(float(v)) for v in m.values[flat_idx])
            fh.write(f"{MASK_NAMES[grid.mask[flat_idx]]} {idx} {vals}\n")


def read_map(path) -> DiscreteMap:
    from .geometry import MASK_CODES
    with open(path) as fh:
        magic = fh.readline().rstrip("\n")
        if magic != MAP_MAGIC:
            raise MapError(f"bad magic line {magic!r}")
        header = fh.readline().split()
        if len(header) != 5:
            raise MapError(f"bad grid descriptor: {header}")
        n = int(header[0]); r = float(header[1]); h = float(header[2])
        half = bool(int(header[3])); d = int(header[4])
        grid = make_grid(n, r, h, half)
        values = np.zeros((grid.num_lattice, d))
        strides = [int(np.prod(grid.shape[i + 1:], dtype=np.int64))
                   for i in range(n)]
        for lineno, line in enumerate(fh, start=3):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1 + n + d:
                raise MapError(f"line {lineno}: expected {1 + n + d} fields")
            code = MASK_CODES.get(parts[0])
            if code is None or code == MASK_OUTSIDE:
                raise MapError(f"line {lineno}: bad mask {parts[0]!r}")
            flat_idx = sum(int(parts[1 + i]) * strides[i] for i in range(n))
            if grid.mask[flat_idx] != code:
                raise MapError(f"line {lineno}: mask mismatch with grid")
            values[flat_idx] = [float(v) for v in parts[1 + n:]]
    return DiscreteMap(grid, values)
