"""Extension of a free-boundary map across the flat face by sphere inversion.

Given u on the upper half-ball with |u| = 1 on the flat face and |u| > 1/2
throughout, set v = u above and v = (inversion of u after mirroring) below.
The metric extends by pullback under the mirror; a scalar weight m turns the
p-energy of v into the p-energy of u on each half.  The pair satisfies an
interior equation with bounded right-hand side, so boundary regularity
questions become interior ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import kernels
from .geometry import (MASK_INTERIOR, HalfBallGrid, MetricField, make_grid)
from .maps import DiscreteMap, gradient, write_map


class ReflectionPreconditionError(ValueError):
    """|u| <= 1/2 somewhere; the inversion-based extension degenerates."""

    def __init__(self, node_index, coords, norm):
        super().__init__(
            f"|u| = {norm:g} <= 1/2 at node {node_index} "
            f"(x = {np.array2string(coords, precision=6)})")
        self.node_index = node_index
        self.coords = coords
        self.norm = norm


@dataclass
class ReflectedPair:
    v: DiscreteMap                  # on the full ball
    h: MetricField                  # pulled-back metric on the full ball
    m: np.ndarray                   # (N,) weight: 1 above, |u(sigma x)|^{2p} below
    p: float
    r_inner: float
    lower: np.ndarray               # (N,) bool, x_n < 0
    mirror: np.ndarray              # (N,) flat index of the mirrored node


def _mirror_index(grid: HalfBallGrid) -> np.ndarray:
    """Flat index of the node with x_n negated, for every full-grid node."""
    shape = grid.shape
    idx = np.arange(grid.num_lattice, dtype=np.int64).reshape(shape)
    return np.ascontiguousarray(np.flip(idx, axis=grid.n - 1)).reshape(-1)


def _embed_index(full_grid: HalfBallGrid, half_grid: HalfBallGrid) -> np.ndarray:
    """Flat half-grid index of every full-grid node's upper-half counterpart
    (x', |x_n|); valid because both lattices share spacing and contain 0."""
    off = (half_grid.shape[0] - full_grid.shape[0]) // 2
    multi = list(np.unravel_index(np.arange(full_grid.num_lattice),
                                  full_grid.shape))
    mid = full_grid.shape[-1] // 2
    multi[-1] = np.abs(multi[-1] - mid) + mid
    multi = [m + off for m in multi]
    return np.ravel_multi_index(multi, half_grid.shape)


def find_reflection_radius(u: DiscreteMap, start: float = None,
                           factor: float = 0.9, min_radius: float = None):
    """Largest radius in the geometric sequence start * factor^j on which
    |u| > 1/2 holds node-wise.  Returns the radius or raises when the
    sequence drops below min_radius (default 4h)."""
    grid = u.grid
    if start is None:
        start = grid.r
    if min_radius is None:
        min_radius = 4 * grid.h
    dist = np.linalg.norm(grid.coords, axis=1)
    norms = np.linalg.norm(u.values, axis=1)
    radius = start
    while radius >= min_radius:
        sel = grid.inside & (dist <= radius + grid.h / 2)
        if norms[sel].min() > 0.5:
            return radius
        radius *= factor
    raise ReflectionPreconditionError(
        int(np.flatnonzero(grid.inside)[np.argmin(norms[grid.inside])]),
        grid.coords[grid.inside][np.argmin(norms[grid.inside])],
        float(norms[grid.inside].min()))


def reflect_map(u: DiscreteMap, metric: MetricField, p: float,
                r_inner: float = None) -> ReflectedPair:
    """Build the reflected pair on the full ball of radius r_inner (default:
    the whole half-ball radius).  Node-exact: v = u above, v = u(sigma x) /
    |u(sigma x)|^2 below; m = 1 above, |u(sigma x)|^{2p} below."""
    grid = u.grid
    if not grid.half:
        raise ValueError("reflect_map expects a half-ball map")
    if r_inner is None:
        r_inner = grid.r
    full = make_grid(grid.n, r_inner, grid.h, half=False)
    embed = _embed_index(full, grid)
    mirror = _mirror_index(full)

    # node-wise precondition |u| > 1/2 on every half-grid node that is used
    used = np.unique(embed[full.inside])
    norms_u = np.linalg.norm(u.values, axis=1)
    bad = used[(norms_u[used] <= 0.5) & (grid.mask[used] != 0)]
    if bad.size:
        j = int(bad[0])
        raise ReflectionPreconditionError(j, grid.coords[j], float(norms_u[j]))

    utilde = u.values[embed]                     # u(x', |x_n|) on full lattice
    lower = full.coords[:, -1] < -1e-12
    s = np.einsum("xc,xc->x", utilde, utilde)
    vvals = utilde.copy()
    low_in = lower & full.inside
    vvals[low_in] = utilde[low_in] / s[low_in, None]
    vvals[~full.inside] = 0.0

    m = np.ones(full.num_lattice)
    m[lower] = s[lower] ** p
    m[~full.inside] = 1.0

    if metric.euclidean:
        h = MetricField.make_euclidean(full)
    else:
        gmats = metric.g[embed].copy()
        # pullback under the mirror flips the sign of the mixed x_n entries
        lo = np.flatnonzero(lower)
        gmats[lo[:, None], -1, :-1] *= -1.0
        gmats[lo[:, None], :-1, -1] *= -1.0
        h = MetricField.from_matrices(full, gmats, check=False)
    return ReflectedPair(v=DiscreteMap(full, vvals), h=h, m=m, p=float(p),
                         r_inner=float(r_inner), lower=lower, mirror=mirror)


def reflect_metric(full_grid: HalfBallGrid, g_fn):
    """Extend a smooth upper-half metric (callable on (N, n) points) to the
    full ball by mirror pullback; returns (MetricField, discrete Lipschitz
    constant, estimated C^1 norm of g).

    The Lipschitz constant is the max difference quotient of the matrix
    entries over node pairs within distance 2h; the C^1 norm is sup of the
    matrix max-norm plus sup of its one-sided difference quotients, measured
    on the upper half.
    """
    coords = full_grid.coords
    upper_pts = coords.copy()
    upper_pts[:, -1] = np.abs(upper_pts[:, -1])
    g = np.asarray(g_fn(upper_pts), dtype=np.float64)
    lower = coords[:, -1] < -1e-12
    lo = np.flatnonzero(lower)
    hmats = g.copy()
    hmats[lo[:, None], -1, :-1] *= -1.0
    hmats[lo[:, None], :-1, -1] *= -1.0
    field = MetricField.from_matrices(full_grid, hmats.copy(), check=False)

    lip = _lipschitz_constant(full_grid, hmats)
    upper_mask = full_grid.inside & (coords[:, -1] >= -1e-12)
    sup_g = float(np.abs(g[upper_mask]).max())
    lip_g = _lipschitz_constant(full_grid, g, restrict=upper_mask)
    return field, lip, sup_g + lip_g


def _lipschitz_constant(grid: HalfBallGrid, mats: np.ndarray,
                        restrict: np.ndarray = None) -> np.ndarray:
    """Max over node pairs within lattice distance 2h of
    max-entry |mats(x) - mats(y)| / |x - y|."""
    shape = grid.shape
    n = grid.n
    sel = grid.inside if restrict is None else restrict
    sel_lat = sel.reshape(shape)
    flat = mats.reshape(shape + mats.shape[1:])
    best = 0.0
    for off in product(range(-2, 3), repeat=n):
        dist = np.linalg.norm(np.array(off)) * grid.h
        if dist == 0 or dist > 2 * grid.h + 1e-12:
            continue
        src = tuple(slice(max(o, 0), s + min(o, 0))
                    for o, s in zip(off, shape))
        dst = tuple(slice(max(-o, 0), s + min(-o, 0))
                    for o, s in zip(off, shape))
        both = sel_lat[src] & sel_lat[dst]
        if not both.any():
            continue
        diff = np.abs(flat[src] - flat[dst])
        diff = diff.reshape(diff.shape[:n] + (-1,)).max(axis=-1)
        best = max(best, float(diff[both].max()) / dist)
    return best


def energy_of_pair(pair: ReflectedPair) -> float:
    """Weighted p-energy of v: sum m |dv|_h^p over the full ball.  Equals
    twice the p-energy of u on the reflected region up to quadrature error."""
    grad = gradient(pair.v)
    e = kernels.energy_density_sq(grad, pair.h.ginv)
    dens = pair.m * e ** (pair.p / 2.0)
    dens[~pair.v.grid.inside] = 0.0
    return float(np.dot(dens, pair.h.weights()))


def residual_growth_check(pair: ReflectedPair, floor: float = 1e-8):
    """Ratio of the weighted discrete p-Laplacian of v to |dv|^p, node-wise on
    interior nodes; the max calibrates the constant c0 in the interior
    equation for v."""
    grid = pair.v.grid
    p = pair.p
    nbr_p, nbr_m, scheme = grid.neighbor_tables()
    grad = kernels.gradient_op(pair.v.values, nbr_p, nbr_m, scheme,
                               1.0 / grid.h)
    e = kernels.energy_density_sq(grad, pair.h.ginv)
    flux = kernels.p_flux(grad, e, p, 0.0, pair.h.ginv)
    w = pair.h.weights() * pair.m
    flux *= w[:, None, None]
    G = kernels.adjoint_op(flux, nbr_p, nbr_m, scheme, 1.0 / grid.h)
    wq = pair.h.weights()
    plap = np.zeros(grid.num_lattice)
    pos = wq > 0
    plap[pos] = np.linalg.norm(G[pos], axis=1) / wq[pos]
    ratio = plap / np.maximum(e ** (p / 2.0), floor)
    interior = grid.mask == MASK_INTERIOR
    worst = int(np.flatnonzero(interior)[np.argmax(ratio[interior])])
    return {"max_ratio": float(ratio[interior].max()),
            "worst_node": worst,
            "worst_coords": grid.coords[worst]}


def write_pair(pair: ReflectedPair, prefix: str) -> None:
    """Serialize as <prefix>.v.map, <prefix>.h.map (matrix rows, d = n^2,
    identity when Euclidean) and <prefix>.m.map (d = 1)."""
    grid = pair.v.grid
    write_map(pair.v, prefix + ".v.map")
    if pair.h.euclidean:
        hm = np.tile(np.eye(grid.n).reshape(-1), (grid.num_lattice, 1))
    else:
        hm = pair.h.g.reshape(grid.num_lattice, -1)
    hmap = DiscreteMap(grid, hm)
    write_map(hmap, prefix + ".h.map")
    write_map(DiscreteMap(grid, pair.m[:, None]), prefix + ".m.map")
