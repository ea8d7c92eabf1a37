"""Multilinear interpolation of discrete maps on the lattice.

Outside-node rows hold zeros, which would bleed into interpolated values near
the staircase rim; lattice values are therefore filled with the nearest
non-outside value before building the interpolant.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import distance_transform_edt

from .maps import DiscreteMap


def filled_lattice(m: DiscreteMap) -> np.ndarray:
    """Lattice-shaped value array with outside nodes replaced by their nearest
    non-outside neighbor's value."""
    grid = m.grid
    lat = m.values.reshape(grid.shape + (m.d,))
    outside = (~grid.inside).reshape(grid.shape)
    if not outside.any():
        return lat
    idx = distance_transform_edt(outside, return_distances=False,
                                 return_indices=True)
    return lat[tuple(idx)]


def map_interpolator(m: DiscreteMap):
    """Vectorized multilinear interpolant; callable on (..., n) point arrays.
    Points are clamped to the lattice cube."""
    grid = m.grid
    lat = filled_lattice(m)
    itp = RegularGridInterpolator(tuple(grid.axes), lat, method="linear",
                                  bounds_error=False, fill_value=None)
    lo = np.array([ax[0] for ax in grid.axes])
    hi = np.array([ax[-1] for ax in grid.axes])

    def evaluate(pts):
        pts = np.clip(np.asarray(pts, dtype=np.float64), lo, hi)
        return itp(pts)

    return evaluate
