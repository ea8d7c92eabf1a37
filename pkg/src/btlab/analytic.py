"""Closed-form maps: the Mobius family of the unit ball, sphere inversion and
its differential, the conformal chart between the ball and the upper half
space, the flat reflection, and the logarithmic annulus comparator.

All maps accept single points (n,) or batches (..., n).  Evaluations carry a
guard band of radius 1e-9 around their singular points and raise rather than
extrapolate inside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AnnulusSpec, HalfBallGrid, annulus_mask
from .maps import DiscreteMap

GUARD = 1e-9
FD_STEP = 1e-5   # central-difference step for differentials not in closed form


class SingularityError(ValueError):
    pass


@dataclass
class MobiusParams:
    a: np.ndarray

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if np.linalg.norm(self.a) >= 1.0:
            raise ValueError(f"Mobius parameter must satisfy |a| < 1, got {self.a}")


def _mobius_stable(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the degree-1 conformal self-map of the ball in a form with the
    |a - x|^-2 pole cancelled; regular on the whole closed ball."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    t = a - x
    s = np.einsum("...i,...i->...", t, t)
    c = 1.0 - float(np.dot(a, a))
    num = a * s[..., None] + c * t
    den = np.dot(a, a) * s + 2.0 * c * np.einsum("...i,i->...", t, a) + c * c
    return num / den[..., None]


def mobius(params: MobiusParams, x) -> np.ndarray:
    """M_a(x): inversion of the shifted sphere map, |M_a(x)| = 1 on |x| = 1."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.linalg.norm(np.atleast_2d(x), axis=-1) > 1.0 + 1e-9):
        raise ValueError("Mobius map is evaluated on the closed unit ball")
    dist = np.linalg.norm(np.atleast_2d(x) - params.a, axis=-1)
    if np.any(dist < GUARD):
        raise SingularityError("evaluation inside the guard band around x = a")
    return _mobius_stable(params.a, x)


def sample_mobius(grid: HalfBallGrid, a) -> DiscreteMap:
    """Sample M_a on all grid nodes.  Uses the pole-free form, so the node
    x = a (where the limit value is 0) is admitted.  Rim nodes beyond |x| = 1
    are clamped radially onto the sphere, where |M_a| = 1."""
    params = MobiusParams(a)
    pts = grid.coords.copy()
    rad = np.linalg.norm(pts, axis=1)
    far = rad > 1.0
    pts[far] /= rad[far, None]
    vals = _mobius_stable(params.a, pts)
    vals[~grid.inside] = 0.0
    return DiscreteMap(grid, vals)


def inversion(q) -> np.ndarray:
    """Sphere inversion q / |q|^2; an involution."""
    q = np.asarray(q, dtype=np.float64)
    s = np.einsum("...i,...i->...", q, q)
    if np.any(np.sqrt(s) < GUARD):
        raise SingularityError("inversion evaluated inside the guard band at 0")
    return q / s[..., None]


def d_inversion(q) -> np.ndarray:
    """Differential of the inversion: Id/|q|^2 - 2 q x q / |q|^4 (symmetric,
    eigenvalues +-1/|q|^2)."""
    q = np.asarray(q, dtype=np.float64)
    s = np.einsum("...i,...i->...", q, q)
    if np.any(np.sqrt(s) < GUARD):
        raise SingularityError("differential evaluated inside the guard band at 0")
    n = q.shape[-1]
    eye = np.eye(n)
    return eye / s[..., None, None] - 2.0 * np.einsum(
        "...i,...j->...ij", q, q) / (s * s)[..., None, None]


def half_space_chart(x) -> np.ndarray:
    """Conformal map from the closed unit ball (minus the north pole N) onto
    the closed upper half space, sending the sphere minus N onto the flat
    boundary."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    north = np.zeros(n)
    north[-1] = 1.0
    if np.any(np.linalg.norm(np.atleast_2d(x) - north, axis=-1) < GUARD):
        raise SingularityError("chart evaluated inside the guard band at N")
    denom = np.einsum("...i,...i->...", x[..., :-1], x[..., :-1]) \
        + (1.0 - x[..., -1]) ** 2
    out = np.empty_like(x)
    out[..., :-1] = 2.0 * x[..., :-1]
    out[..., -1] = 1.0 - np.einsum("...i,...i->...", x, x)
    return out / denom[..., None]


def half_space_chart_inv(y) -> np.ndarray:
    """Inverse of :func:`half_space_chart`, from the closed upper half space
    onto the closed unit ball."""
    y = np.asarray(y, dtype=np.float64)
    denom = np.einsum("...i,...i->...", y[..., :-1], y[..., :-1]) \
        + (1.0 + y[..., -1]) ** 2
    out = np.empty_like(y)
    out[..., :-1] = 2.0 * y[..., :-1]
    out[..., -1] = np.einsum("...i,...i->...", y, y) - 1.0
    return out / denom[..., None]


def flat_reflection(x) -> np.ndarray:
    """Orthogonal involution flipping the last coordinate; fixes x_n = 0."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    out[..., -1] = -out[..., -1]
    return out


def numeric_differential(fn, x, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of fn at a single point x, (m, n)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# logarithmic annulus comparator
# ---------------------------------------------------------------------------

@dataclass
class ComparatorSpec:
    """Radial-logarithmic interpolation between values a at |x| = R1 and b at
    |x| = R2, on an n-dimensional annulus, measured in the p-energy."""

    a: np.ndarray
    b: np.ndarray
    r_inner: float
    r_outer: float
    n: int
    p: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (self.r_inner > 0 and self.r_inner < self.r_outer):
            raise ValueError(
                f"need 0 < R1 < R2, got {self.r_inner}, {self.r_outer}")
        if self.p < self.n:
            raise ValueError(f"need p >= n, got p={self.p}, n={self.n}")


def log_comparator_values(spec: ComparatorSpec, points: np.ndarray) -> np.ndarray:
    """a + log(|x|/R1)/log(R2/R1) (b - a) at the given points."""
    rad = np.linalg.norm(points, axis=-1)
    lam = np.log(np.maximum(rad, 1e-300) / spec.r_inner) \
        / math.log(spec.r_outer / spec.r_inner)
    return spec.a + lam[..., None] * (spec.b - spec.a)


def log_comparator(spec: ComparatorSpec, grid: HalfBallGrid) -> DiscreteMap:
    """Sample the comparator on the grid's annulus nodes (zero elsewhere)."""
    ann = annulus_mask(grid, AnnulusSpec(np.zeros(grid.n), spec.r_inner,
                                         spec.r_outer, clipped=False))
    vals = np.zeros((grid.num_lattice, spec.a.size))
    vals[ann] = log_comparator_values(spec, grid.coords[ann])
    return DiscreteMap(grid, vals)


def sphere_area(n: int) -> float:
    """Surface measure of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def radial_factor(n: int, p: float, r_inner: float, r_outer: float) -> float:
    """Integral of r^{n-1-p} over [R1, R2]: (R2^{n-p}-R1^{n-p})/(n-p) for
    p != n, log(R2/R1) at p = n."""
    if abs(p - n) < 1e-14:
        return math.log(r_outer / r_inner)
    return (r_outer ** (n - p) - r_inner ** (n - p)) / (n - p)


def comparator_energy(spec: ComparatorSpec) -> float:
    """Closed-form Euclidean p-energy of the comparator over the full annulus:
    |S^{n-1}| |b-a|^p / log(R2/R1)^p times the radial factor."""
    gap = float(np.linalg.norm(spec.b - spec.a))
    logr = math.log(spec.r_outer / spec.r_inner)
    return sphere_area(spec.n) * gap ** spec.p / logr ** spec.p \
        * radial_factor(spec.n, spec.p, spec.r_inner, spec.r_outer)


def comparator_quadrature(spec: ComparatorSpec, grid: HalfBallGrid) -> float:
    """Grid quadrature of the analytic energy density |b-a|^p /
    (|x| log(R2/R1))^p over the (full) annulus mask."""
    ann = annulus_mask(grid, AnnulusSpec(np.zeros(grid.n), spec.r_inner,
                                         spec.r_outer, clipped=False))
    rad = np.linalg.norm(grid.coords[ann], axis=1)
    gap = float(np.linalg.norm(spec.b - spec.a))
    dens = (gap / (rad * math.log(spec.r_outer / spec.r_inner))) ** spec.p
    return float(np.sum(dens) * grid.h ** grid.n)
