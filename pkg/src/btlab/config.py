"""Threshold constants for bubble extraction.

The analysis guarantees existence of the gap constant eps_b, the comparison
constant eps_*, and the concentration constant eps_0, but gives no values.
Defaults are calibrated from the one measurable anchor: the n-energy of a
single standard bubble (which every non-constant bubble must reach).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def standard_bubble_energy(n: int, h: float = 1.0 / 32.0) -> float:
    """Measured n-energy of the degree-1 conformal self-map of the unit ball
    with a = 0 (the map -x), on the reference full-ball grid."""
    from .geometry import MetricField, make_grid
    from .analytic import sample_mobius
    from .maps import p_energy
    grid = make_grid(n, 1.0, h, half=False)
    m = sample_mobius(grid, np.zeros(n))
    return p_energy(m, MetricField.make_euclidean(grid), float(n)).total


@dataclass
class Thresholds:
    n: int
    eps_b: float = None          # gap constant
    eps_0: float = None          # concentration-point constant
    eps_s: float = None          # comparison (neck smallness) constant
    M: float = None              # energy bound sup_k E_{p_k}(u_k)
    sep_threshold: float = 10.0
    bisection_tol: float = 1e-3
    min_scale_factor: float = 2.0
    max_generations: int = 4
    window_radius: float = 8.0   # bubble window, in rescaled units
    detect_radius_frac: float = 0.25   # macroscopic cap on detected scales

    def __post_init__(self):
        if self.eps_b is None:
            self.eps_b = 0.5 * standard_bubble_energy(self.n) ** (1.0 / self.n)
        if self.eps_0 is None:
            self.eps_0 = self.eps_b
        if self.eps_s is None:
            self.eps_s = self.eps_b
        if self.M is None:
            self.M = 10.0 * self.eps_b ** self.n
        for name in ("eps_b", "eps_0", "eps_s", "M", "sep_threshold",
                     "bisection_tol", "min_scale_factor", "window_radius",
                     "detect_radius_frac"):
            if getattr(self, name) <= 0:
                raise ValueError(f"threshold {name} must be positive")

    def eps_star(self, p: float, vol: float) -> float:
        """min(eps_0 / vol^{1/n - 1/p}, eps_s, eps_b) with vol the half-ball
        volume of the detection region."""
        return min(self.eps_0 / vol ** (1.0 / self.n - 1.0 / p),
                   self.eps_s, self.eps_b)

    def lambda_star_bound(self) -> float:
        return self.M / self.eps_b ** self.n


def generation_level(q: int) -> float:
    """Threshold multiplier t_q for generation q: 1/2 for the first
    detection, then 1 - 1/(2(q+2)), strictly increasing within (1/2, 1)."""
    if q == 0:
        return 0.5
    return 1.0 - 1.0 / (2.0 * (q + 2))
