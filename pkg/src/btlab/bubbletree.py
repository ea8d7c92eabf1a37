"""Bubble-tree extraction: concentration functions, scale detection,
rescaling, bubble subtraction, separation and amplification bookkeeping,
neck energies, the energy-identity ledger, synthetic sequence generation,
and boundary degree.

A sequence of maps u_k with exponents p_k = n + alpha_k, alpha_k -> 0, that
concentrates energy at small scales is decomposed as

    u_k = u + sum_i [omega_i((x - a_k^i)/lambda_k^i) - omega_i(inf)] + o(1),

and the extraction recovers the (a_k, lambda_k) sequences and bubble maps
omega_i from level crossings of the concentration function
Q(t) = sup_x (local p_k-energy in B(x, t)).
"""

from __future__ import annotations

import json
import math
import warnings as _warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve

from .config import Thresholds, generation_level
from .geometry import (MASK_FLAT, MASK_SPHERE, AnnulusSpec, HalfBallGrid,
                       MetricField, annulus_mask, make_grid)
from .maps import (DiscreteMap, constant_map, from_function, p_energy,
                   renormalize_flat)


class SubResolutionError(ValueError):
    pass


class UnresolvedDegree(ValueError):
    def __init__(self, raw):
        super().__init__(f"raw degree {raw:g} is further than 0.1 from an "
                         "integer (under-resolved boundary trace)")
        self.raw = raw


# ---------------------------------------------------------------------------
# concentration functions and scale detection
# ---------------------------------------------------------------------------

@dataclass
class ConcentrationProfile:
    """Q(t) = max over grid-node centers of the weighted energy sum over
    nodes within distance < t; exact on the finite center set."""

    grid: HalfBallGrid
    p: float
    radii: np.ndarray
    q: np.ndarray
    _lat: np.ndarray = field(repr=False, default=None)   # density * weights
    _inside_lat: np.ndarray = field(repr=False, default=None)
    detected: object = None

    @property
    def total(self) -> float:
        return float(self._lat.sum())

    def q_at(self, t: float):
        """(Q(t), argmax center flat index); ties broken by the first
        (lexicographically smallest) node."""
        if t <= 0:
            return 0.0, 0
        conv = _ball_convolve(self._lat, self.grid, t)
        conv = np.where(self._inside_lat, conv, -1.0)
        c = int(np.argmax(conv))
        return max(float(conv.reshape(-1)[c]), 0.0), c

    def radial_crossing(self, center: int, target: float, t_max: float):
        """Smallest radius t (a node distance, nudged up so the strict ball
        contains its node) with local energy >= target, or None."""
        diff = self.grid.coords - self.grid.coords[center]
        dist = np.sqrt(np.einsum("xi,xi->x", diff, diff))
        sel = dist <= t_max
        d = dist[sel]
        order = np.argsort(d, kind="stable")
        cum = np.cumsum(self._lat.reshape(-1)[sel][order])
        j = int(np.searchsorted(cum, target, side="left"))
        if j >= len(cum):
            return None
        return float(np.nextafter(d[order[j]], np.inf))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,Q\n")
            for t, q in zip(self.radii, self.q):
                fh.write(f"{t!r},{q!r}\n")


def _ball_offsets(n: int, h: float, t: float) -> np.ndarray:
    m = int(math.floor(t / h))
    ax = np.arange(-m, m + 1)
    mesh = np.meshgrid(*([ax] * n), indexing="ij")
    off = np.stack([a.reshape(-1) for a in mesh], axis=1)
    dist = np.sqrt((off * off).sum(axis=1)) * h
    return off[dist < t]


def _ball_convolve(lat: np.ndarray, grid: HalfBallGrid, t: float) -> np.ndarray:
    """Sum of lat over the strict ball of radius t around every node.  Direct
    shifted-slice accumulation when cheap (and then exactly ordered), FFT
    convolution otherwise."""
    off = _ball_offsets(grid.n, grid.h, t)
    if off.size == 0:
        return np.zeros(grid.shape)
    if len(off) * lat.size <= 4e7:
        acc = np.zeros(grid.shape)
        for o in off:
            src = tuple(slice(max(v, 0), s + min(v, 0))
                        for v, s in zip(o, grid.shape))
            dst = tuple(slice(max(-v, 0), s + min(-v, 0))
                        for v, s in zip(o, grid.shape))
            acc[dst] += lat[src]
        return acc
    m = int(math.floor(t / grid.h))
    kern = np.zeros((2 * m + 1,) * grid.n)
    kern[tuple((off + m).T)] = 1.0
    return fftconvolve(lat, kern, mode="same")


def concentration_function(m: DiscreteMap, metric: MetricField, p: float,
                           radii) -> ConcentrationProfile:
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size and (np.any(np.diff(radii) <= 0) or radii[0] < 0):
        raise ValueError("radii must be nonnegative and increasing")
    rep = p_energy(m, metric, p)
    lat = (rep.density * metric.weights()).reshape(m.grid.shape)
    inside_lat = m.grid.inside.reshape(m.grid.shape)
    prof = ConcentrationProfile(grid=m.grid, p=float(p), radii=radii,
                                q=np.zeros(radii.size), _lat=lat,
                                _inside_lat=inside_lat)
    prof.q = np.array([prof.q_at(t)[0] for t in radii])
    return prof


@dataclass
class NoConcentration:
    q_max: float
    target: float


@dataclass
class Detection:
    center_index: int
    center: np.ndarray
    scale: float
    level: float            # achieved Q at the detected scale
    target: float


def detect_scale(profile: ConcentrationProfile, target: float,
                 t_max: float = None):
    """Smallest radius at which Q crosses `target`, with the center realizing
    the sup there.  Found by alternating exact radial level crossings with
    argmax updates; each argmax can only move the crossing down, so the
    iteration terminates at the crossing/center fixed point."""
    grid = profile.grid
    if t_max is None:
        t_max = float(profile.radii[-1]) if profile.radii.size else grid.r
    if target <= 0:
        return Detection(0, grid.coords[0], 0.0, 0.0, float(target))
    q0, c = profile.q_at(t_max)
    if q0 < target:
        return NoConcentration(q_max=q0, target=float(target))
    t_best = None
    c_best = c
    for _ in range(20):
        t_c = profile.radial_crossing(c, target, t_max)
        if t_c is not None and (t_best is None or t_c < t_best):
            t_best, c_best = t_c, c
        q, c2 = profile.q_at(t_best)
        if c2 == c_best:
            break
        t_c2 = profile.radial_crossing(c2, target, t_max)
        if t_c2 is None or t_c2 >= t_best - grid.h * 1e-9:
            break
        c = c2
    q_ach, _ = profile.q_at(t_best)
    det = Detection(center_index=int(c_best),
                    center=grid.coords[c_best].copy(),
                    scale=float(t_best), level=float(q_ach),
                    target=float(target))
    profile.detected = det
    return det


# ---------------------------------------------------------------------------
# rescaling and bubble subtraction
# ---------------------------------------------------------------------------

def rescale(m: DiscreteMap, center, scale: float, *, window: float = 8.0,
            min_scale_factor: float = 2.0, max_axis_nodes: int = 1025,
            half: bool = None) -> DiscreteMap:
    """Map x -> u(center + scale * x) on a window grid of radius `window`
    (shrunk to stay on available data), values by multilinear interpolation.
    `half` overrides the window topology: half window for boundary bubbles
    (center on the flat face), full ball for interior ones."""
    from .interp import map_interpolator
    if scale <= 0:
        raise ValueError("scale must be positive")
    grid = m.grid
    if scale < grid.h * min_scale_factor:
        raise SubResolutionError(
            f"scale {scale:g} below {min_scale_factor:g} grid spacings "
            f"(h = {grid.h:g})")
    center = np.asarray(center, dtype=np.float64)
    w = min(window, 0.95 * grid.r / scale)
    if w < 1.0:
        raise ValueError(f"window radius {w:g} too small at scale {scale:g}")
    h_new = max(grid.h / scale, 2.0 * w / (max_axis_nodes - 1))
    h_new = min(h_new, w / 8.0)
    gnew = make_grid(grid.n, w, h_new,
                     half=grid.half if half is None else half)
    pts = center + scale * gnew.coords
    vals = map_interpolator(m)(pts)
    vals[~gnew.inside] = 0.0
    return DiscreteMap(gnew, vals)


@dataclass
class BubbleRecord:
    generation: int
    ks: list                        # sequence indices with a detection
    centers: dict                   # k -> (n,) center
    scales: dict                    # k -> scale
    omega: DiscreteMap              # final-k rescaled window
    omega_inf: np.ndarray
    lambda_star: float
    energy: float                   # E_n of the extension over the domain
    level: float                    # detection target at the final k
    degree: object = None
    quantized: bool = True
    _interp: object = field(default=None, repr=False)

    def final_k(self):
        return self.ks[-1]

    def interp(self):
        from .interp import map_interpolator
        if self._interp is None:
            self._interp = map_interpolator(self.omega)
        return self._interp

    def evaluate_extension(self, y: np.ndarray) -> np.ndarray:
        """omega on rescaled points y: even reflection across the flat face
        (boundary bubbles only); beyond 0.9 of the window radius the value
        decays to omega(inf) like 1/|y|, matching the leading tail of a
        finite-energy bubble with a limit at infinity."""
        y = np.asarray(y, dtype=np.float64).copy()
        if self.omega.grid.half:
            y[..., -1] = np.abs(y[..., -1])
        rad = np.linalg.norm(y, axis=-1)
        r0 = 0.9 * self.omega.grid.r
        out = np.zeros(y.shape, dtype=np.float64)
        near = rad <= r0
        if near.any():
            out[near] = self.interp()(y[near])
        far = ~near
        if far.any():
            anchor = self.interp()(y[far] * (r0 / rad[far])[..., None])
            out[far] = self.omega_inf + (anchor - self.omega_inf) \
                * (r0 / rad[far])[..., None]
        return out


def estimate_omega_inf(omega: DiscreteMap) -> np.ndarray:
    """Mean of omega over the outermost 10%-width annulus of its window."""
    grid = omega.grid
    sel = annulus_mask(grid, AnnulusSpec(np.zeros(grid.n), 0.9 * grid.r,
                                         grid.r + grid.h, clipped=False))
    if not sel.any():
        sel = grid.inside
    return omega.values[sel].mean(axis=0)


def subtract_bubbles(u: DiscreteMap, records, k: int) -> DiscreteMap:
    """w = u - sum_i [omega_i((x - a_k^i)/lambda_k^i) - omega_i(inf)] using
    each record's (center, scale) at sequence index k."""
    vals = u.values.copy()
    inside = u.grid.inside
    pts = u.grid.coords[inside]
    for rec in records:
        if k not in rec.scales:
            continue
        y = (pts - rec.centers[k]) / rec.scales[k]
        vals[inside] -= rec.evaluate_extension(y) - rec.omega_inf
    return DiscreteMap(u.grid, vals)


# ---------------------------------------------------------------------------
# separation and amplification arithmetic
# ---------------------------------------------------------------------------

def pair_separation(c1, s1, c2, s2) -> float:
    """max(l1/l2, l2/l1, |a1-a2|/(l1+l2)) for one pair at one index."""
    return max(s1 / s2, s2 / s1,
               float(np.linalg.norm(np.asarray(c1) - np.asarray(c2)))
               / (s1 + s2))


def separation_check(records, sep_threshold: float = 10.0, window: int = 3):
    """Pairwise separation ratios over the trailing indices; a pair passes
    when the final ratio exceeds the threshold and the ratios increase over
    the last `window` common indices."""
    result = {"pairs": [], "all_pass": True}
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            ks = [k for k in records[i].ks if k in records[j].scales]
            ks = ks[-window:]
            ratios = [pair_separation(records[i].centers[k],
                                      records[i].scales[k],
                                      records[j].centers[k],
                                      records[j].scales[k]) for k in ks]
            ok = (len(ratios) >= 2 and ratios[-1] > sep_threshold
                  and all(a < b for a, b in zip(ratios, ratios[1:])))
            result["pairs"].append({"i": i, "j": j, "ratios": ratios,
                                    "pass": bool(ok)})
            result["all_pass"] = result["all_pass"] and ok
    return result


def lambda_star(scales, ps, n: int, window: int = 3) -> float:
    """Finite-window liminf proxy: min of lambda_k^{n - p_k} over the last
    `window` indices.  Raw value, never clamped."""
    scales = np.asarray(scales, dtype=np.float64)
    ps = np.asarray(ps, dtype=np.float64)
    if scales.shape != ps.shape or scales.size == 0:
        raise ValueError("scale and exponent sequences must match and be nonempty")
    vals = scales ** (n - ps)
    return float(vals[-min(window, len(vals)):].min())


# ---------------------------------------------------------------------------
# sequences and extraction
# ---------------------------------------------------------------------------

@dataclass
class SequenceSpec:
    n: int
    ks: list
    alphas: list
    maps: list                      # DiscreteMap per k
    M: float
    truth: list = None              # generator ground truth, if synthetic
    warnings: list = field(default_factory=list)

    @property
    def ps(self):
        return [self.n + a for a in self.alphas]

    def __post_init__(self):
        if not (len(self.ks) == len(self.alphas) == len(self.maps)):
            raise ValueError("ks, alphas and maps must have equal length")
        if any(a < 0 for a in self.alphas):
            raise ValueError("exponent offsets must be nonnegative")
        if any(a < b for a, b in zip(self.alphas, self.alphas[1:])):
            raise ValueError("exponent offsets must be nonincreasing")

    def energies(self):
        return [p_energy(m, MetricField.make_euclidean(m.grid), p).total
                for m, p in zip(self.maps, self.ps)]


@dataclass
class EnergyLedger:
    e_total: float                  # E_{p_k}(u_k) at the final k
    e_weak: float                   # E_n of the final remainder
    bubbles: list                   # (lambda_star, energy) per record
    defect: float
    neck_energies: list
    separation: dict
    incomplete: bool
    per_k: list                     # (k, E_total_k, E_remainder_k, defect_k)
    degrees: dict = None

    def to_dict(self, records) -> dict:
        gens = []
        for rec, (ls, en) in zip(records, self.bubbles):
            entry = {"generation": rec.generation,
                     "center": [float(v) for v in rec.centers[rec.final_k()]],
                     "scale": float(rec.scales[rec.final_k()]),
                     "lambda_star": float(ls),
                     "energy": float(en),
                     "quantized": bool(rec.quantized)}
            if rec.degree is not None:
                entry["degree"] = int(rec.degree)
            gens.append(entry)
        out = {"generations": gens,
               "E_total": self.e_total,
               "E_weak": self.e_weak,
               "defect": self.defect,
               "neck_energies": self.neck_energies,
               "separation_matrix": self.separation,
               "incomplete": self.incomplete,
               "per_k": [list(row) for row in self.per_k]}
        if self.degrees is not None:
            out["degrees"] = self.degrees
        return out

    def defect_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("k,defect\n")
            for row in self.per_k:
                fh.write(f"{row[0]},{row[3]!r}\n")


def extract_tree(spec: SequenceSpec, thr: Thresholds = None,
                 compute_degrees: bool = None):
    """Run the generation loop and assemble the ledger.

    Per generation q: detect (a_k, lambda_k) on every current remainder at
    level t_q * eps_star^{p_k} (t_0 = 1/2), rescale the final-k remainder
    into the bubble window, record, subtract everywhere, repeat with the
    next-threshold generation.  Stops when the final-k remainder shows no
    concentration; hitting the generation cap with concentration left marks
    the result INCOMPLETE.
    """
    if thr is None:
        thr = Thresholds(spec.n)
    n = spec.n
    ps = spec.ps
    metrics = [MetricField.make_euclidean(m.grid) for m in spec.maps]
    vols = [float(met.weights().sum()) for met in metrics]
    eps_stars = [thr.eps_star(p, v) for p, v in zip(ps, vols)]
    remainders = [m.copy() for m in spec.maps]
    e_totals = [p_energy(m, met, p).total
                for m, met, p in zip(spec.maps, metrics, ps)]

    records = []
    incomplete = False
    K = len(spec.ks) - 1

    def detect_all(q):
        dets = []
        for i, (w, met, p) in enumerate(zip(remainders, metrics, ps)):
            target = generation_level(q) * eps_stars[i] ** p
            prof = concentration_function(w, met, p, np.array([]))
            t_max = thr.detect_radius_frac * w.grid.r
            det = detect_scale(prof, target, t_max=t_max)
            if isinstance(det, Detection) and w.grid.half \
                    and det.center[-1] <= thr.window_radius * det.scale:
                # boundary bubble: snap the center onto the flat face so the
                # half-window clips where the domain does
                det.center[-1] = 0.0
            dets.append(det)
        return dets

    for q in range(thr.max_generations):
        dets = detect_all(q)
        if isinstance(dets[K], NoConcentration):
            break
        det_K = dets[K]
        boundary = (not remainders[K].grid.half) or det_K.center[-1] == 0.0
        omega = rescale(remainders[K], det_K.center, det_K.scale,
                        window=thr.window_radius,
                        min_scale_factor=thr.min_scale_factor,
                        half=remainders[K].grid.half and boundary)
        om_inf = estimate_omega_inf(omega)
        good = [(k_i, d) for k_i, d in enumerate(dets)
                if isinstance(d, Detection)]
        ks = [spec.ks[k_i] for k_i, _ in good]
        centers = {spec.ks[k_i]: d.center for k_i, d in good}
        scales = {spec.ks[k_i]: d.scale for k_i, d in good}
        lam_seq = [d.scale for _, d in good]
        p_seq = [ps[k_i] for k_i, _ in good]
        rec = BubbleRecord(
            generation=q, ks=ks, centers=centers, scales=scales,
            omega=omega, omega_inf=om_inf,
            lambda_star=lambda_star(lam_seq, p_seq, n),
            energy=0.0, level=det_K.target)
        # energy of the record's extension over the whole final-k domain,
        # so the modeled tail beyond the window is booked to the bubble and
        # not to the defect
        grid_K = remainders[K].grid
        ext_vals = np.zeros((grid_K.num_lattice, remainders[K].d))
        pts = grid_K.coords[grid_K.inside]
        k_K = spec.ks[K]
        ext_vals[grid_K.inside] = rec.evaluate_extension(
            (pts - rec.centers[k_K]) / rec.scales[k_K])
        rec.energy = p_energy(DiscreteMap(grid_K, ext_vals), metrics[K],
                              float(n)).total
        rec.quantized = bool(rec.energy >= thr.eps_b ** n * (1.0 - 1e-9))
        if compute_degrees or (compute_degrees is None
                               and omega.d == omega.grid.n):
            try:
                # the window edge sits in the bubble's tail where the image
                # has not returned to the sphere; a looser norm floor still
                # certifies a nonvanishing trace
                rec.degree = degree(omega, min_norm=0.2)[0]
            except (UnresolvedDegree, ValueError):
                rec.degree = None
        records.append(rec)
        remainders = [subtract_bubbles(w, [rec], k)
                      for w, k in zip(remainders, spec.ks)]
    else:
        final = detect_all(thr.max_generations)
        incomplete = isinstance(final[K], Detection)

    degrees = None
    if (compute_degrees is not False and remainders[K].d == n
            and n in (2, 3)):
        try:
            deg_u = degree(remainders[K], min_norm=0.2)[0]
            deg_oms = [rec.degree for rec in records]
            degrees = {"u": deg_u, "omega": deg_oms,
                       "omega_sum": sum(d for d in deg_oms if d is not None)}
        except (UnresolvedDegree, ValueError):
            degrees = None

    e_weak_per_k = [p_energy(w, met, float(n)).total
                    for w, met in zip(remainders, metrics)]
    bubble_terms = [(rec.lambda_star, rec.energy) for rec in records]
    bubble_sum = sum(ls * en for ls, en in bubble_terms)
    per_k = [(k, et, ew, et - ew - bubble_sum)
             for k, et, ew in zip(spec.ks, e_totals, e_weak_per_k)]
    necks = [neck_energy(spec, rec) for rec in records]
    ledger = EnergyLedger(
        e_total=e_totals[K], e_weak=e_weak_per_k[K], bubbles=bubble_terms,
        defect=e_totals[K] - e_weak_per_k[K] - bubble_sum,
        neck_energies=necks,
        separation=separation_check(records, thr.sep_threshold)
        if len(records) >= 2 else {"pairs": [], "all_pass": True},
        incomplete=incomplete, per_k=per_k, degrees=degrees)
    return records, ledger


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------

NORTH_CACHE = {}


def _north(n):
    e = np.zeros(n)
    e[-1] = 1.0
    return e


def standard_bubble(mobius_a) -> tuple:
    """(fn, value at infinity) of the half-space bubble obtained by reading
    the ball self-map through the conformal chart; degree 1, |fn| = 1 on the
    flat boundary."""
    from .analytic import _mobius_stable, half_space_chart_inv
    a = np.asarray(mobius_a, dtype=np.float64)
    n = a.size

    def fn(y):
        return _mobius_stable(a, half_space_chart_inv(np.asarray(y, float)))

    return fn, _mobius_stable(a, _north(n))


@lru_cache(maxsize=None)
def _calibration_scale(n: int, a_key: tuple, level: float) -> float:
    """c such that the n-energy of y -> bubble(c y) inside the unit half-ball
    equals `level`; makes detection at that level return scale ~ 1."""
    fn, _ = standard_bubble(np.array(a_key))
    grid = make_grid(n, 2.0, 1.0 / 64.0 if n == 2 else 1.0 / 16.0, half=True)
    m = from_function(grid, fn)
    met = MetricField.make_euclidean(grid)
    rep = p_energy(m, met, float(n))
    cell = rep.density * met.weights()
    dist = np.linalg.norm(grid.coords, axis=1)
    order = np.argsort(dist, kind="stable")
    cum = np.cumsum(cell[order])
    j = int(np.searchsorted(cum, level, side="left"))
    if j >= len(cum):
        raise ValueError(f"bubble energy {cum[-1]:g} below level {level:g}")
    return float(dist[order[j]])


@dataclass
class SyntheticBubble:
    mobius_a: np.ndarray
    center_rule: object             # k -> (n,) point on the flat boundary
    scale_rule: object              # k -> scale

    def __post_init__(self):
        self.mobius_a = np.asarray(self.mobius_a, dtype=np.float64)


def _taper_flat_normalization(vals, grid, centers, k) -> list:
    """Divide by the flat-trace norm, tapered to 1 over a depth that grows
    with the distance from the bubble centers.  Renormalizing only the
    boundary row would tear an O(|u|-1)/h normal gradient off the flat face
    wherever overlapping tails push the trace off-unit; the taper spreads
    the same correction over a resolved depth."""
    from .geometry import MASK_FLAT
    if not grid.half:
        return []
    warns = []
    shape = grid.shape
    d = vals.shape[1]
    lat = vals.reshape(shape + (d,))
    i0 = int(np.argmin(np.abs(grid.axes[-1])))
    s = np.linalg.norm(lat[..., i0, :], axis=-1)
    has_flat = (grid.mask.reshape(shape) == MASK_FLAT)[..., i0]
    low = has_flat & (s < 0.5)
    if low.any():
        msg = (f"index k={k}: flat trace reaches |u| = "
               f"{s[has_flat].min():.3g} before normalization")
        warns.append(msg)
        _warnings.warn(msg)
    s_eff = np.where(has_flat & (s >= 0.5), s, 1.0)
    mesh = np.meshgrid(*grid.axes[:-1], indexing="ij")
    if centers:
        ell = np.min([np.sqrt(sum((m - c[i]) ** 2
                                  for i, m in enumerate(mesh)))
                      for c in centers], axis=0)
    else:
        ell = np.full(shape[:-1], grid.r / 4.0)
    ell = np.clip(ell, 4.0 * grid.h, grid.r / 4.0)
    depth = np.maximum(grid.axes[-1], 0.0)
    taper = np.clip(1.0 - depth / ell[..., None], 0.0, 1.0)
    lat /= (1.0 + (s_eff - 1.0)[..., None] * taper)[..., None]
    return warns


def _align_rotation(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Proper rotation taking unit vector src to unit vector dst, acting
    in their span (identity on the orthogonal complement)."""
    u = np.asarray(src, dtype=np.float64)
    v = np.asarray(dst, dtype=np.float64)
    n = u.size
    cos = float(np.clip(u @ v, -1.0, 1.0))
    resid = v - cos * u
    sin = np.linalg.norm(resid)
    if sin < 1e-12:
        if cos > 0.0:
            return np.eye(n)
        # antipodal: half-turn in the plane of u and any perpendicular
        w = np.zeros(n)
        w[np.argmin(np.abs(u))] = 1.0
        w -= (w @ u) * u
        w /= np.linalg.norm(w)
        return np.eye(n) - 2.0 * (np.outer(u, u) + np.outer(w, w))
    w = resid / sin
    return (np.eye(n) + sin * (np.outer(w, u) - np.outer(u, w))
            + (cos - 1.0) * (np.outer(u, u) + np.outer(w, w)))


def make_synthetic_sequence(n: int, ks, bubbles, r: float = 1.0,
                            alpha_rule=None, background=None,
                            grid_factor: float = 8.0,
                            thr: Thresholds = None,
                            max_axis_nodes: int = 4097) -> SequenceSpec:
    """u_k = background + sum_i R_i [omega_i((x - a_k^i)/lambda_k^i) -
    omega_i(inf)], projected onto the sphere; each rotation R_i aligns the
    bubble's far-field with the partial sum at its center, and prototypes
    are calibrated so the first-generation detection scale matches
    lambda_k."""
    if thr is None:
        thr = Thresholds(n)
    if alpha_rule is None:
        alpha_rule = lambda k: 1.0 / k
    level = generation_level(0) * min(thr.eps_0, thr.eps_s, thr.eps_b) ** n
    protos = []
    for b in bubbles:
        c = _calibration_scale(n, tuple(b.mobius_a), level)
        fn, inf_val = standard_bubble(b.mobius_a)
        protos.append((b, c, fn, inf_val))

    if background is None:
        background = protos[0][3].copy() if protos else np.eye(n)[0]
    bg = background

    ks = list(ks)
    # A naive sum of corrections is only near-unit where each bubble's
    # far-field value matches what the rest of the tower takes at its
    # center; otherwise renormalizing the flat trace tears an O(1/h)
    # jump off the boundary. Rotate each prototype so omega(inf) hits
    # the partial sum's value at the center, judged at the finest index
    # so the prototype stays the same map for every k.
    k_ref = ks[-1] if ks else None
    rotations = []
    for i, (b, c, fn, inf_val) in enumerate(protos):
        a_i = np.asarray(b.center_rule(k_ref), dtype=np.float64)
        tgt = (np.asarray(bg(a_i[None]), float)[0] if callable(bg)
               else np.asarray(bg, dtype=np.float64)).copy()
        for j in range(i):
            bj, cj, fnj, infj = protos[j]
            aj = np.asarray(bj.center_rule(k_ref), dtype=np.float64)
            y = (a_i - aj) / float(bj.scale_rule(k_ref))
            y[-1] = abs(y[-1])
            with np.errstate(divide="ignore", invalid="ignore"):
                tgt += rotations[j] @ (fnj(cj * y[None])[0] - infj)
        norm = np.linalg.norm(tgt)
        tgt = tgt / norm if norm > 1e-9 else inf_val
        rotations.append(_align_rotation(inf_val, tgt))
    alphas = [float(alpha_rule(k)) for k in ks]
    maps = []
    truth = [{"mobius_a": b.mobius_a.tolist(), "calibration": c,
              "rotation": rotations[i].tolist(), "centers": {}, "scales": {}}
             for i, (b, c, _, _) in enumerate(protos)]
    warns = []
    for k in ks:
        lam_min = min(b.scale_rule(k) for b, _, _, _ in protos) \
            if protos else r
        h_k = min(lam_min / grid_factor, r / 8.0)
        if 2 * math.floor(r / h_k) + 1 > max_axis_nodes:
            raise SubResolutionError(
                f"index k={k}: scale {lam_min:g} needs spacing {h_k:g}, "
                f"beyond the {max_axis_nodes}-node axis cap")
        grid = make_grid(n, r, h_k, half=True)
        vals = (bg(grid.coords) if callable(bg)
                else np.tile(np.asarray(bg, float), (grid.num_lattice, 1)))
        vals = np.asarray(vals, dtype=np.float64).copy()
        for i, (b, c, fn, inf_val) in enumerate(protos):
            a_k = np.asarray(b.center_rule(k), dtype=np.float64)
            lam_k = float(b.scale_rule(k))
            if lam_k < h_k * thr.min_scale_factor:
                raise SubResolutionError(
                    f"index k={k}: bubble {i} scale {lam_k:g} below "
                    f"{thr.min_scale_factor:g} spacings")
            y = (grid.coords - a_k) / lam_k
            y[:, -1] = np.abs(y[:, -1])
            with np.errstate(divide="ignore", invalid="ignore"):
                vals += (fn(c * y) - inf_val) @ rotations[i].T
            truth[i]["centers"][k] = a_k.tolist()
            truth[i]["scales"][k] = lam_k
        vals[~grid.inside] = 0.0
        centers_k = [np.asarray(b.center_rule(k), float)[:-1]
                     for b, _, _, _ in protos]
        warns += _taper_flat_normalization(vals, grid, centers_k, k)
        renormalize_flat(vals, grid)
        maps.append(DiscreteMap(grid, vals))

    k_last = ks[-1]
    for i in range(len(protos)):
        for j in range(i + 1, len(protos)):
            sep = pair_separation(
                protos[i][0].center_rule(k_last), protos[i][0].scale_rule(k_last),
                protos[j][0].center_rule(k_last), protos[j][0].scale_rule(k_last))
            if sep <= thr.sep_threshold:
                msg = (f"bubbles {i} and {j} violate separation at k={k_last} "
                       f"(ratio {sep:g}); extraction may merge them")
                warns.append(msg)
                _warnings.warn(msg)

    energies = [p_energy(m, MetricField.make_euclidean(m.grid), n + a).total
                for m, a in zip(maps, alphas)]
    spec = SequenceSpec(n=n, ks=ks, alphas=alphas, maps=maps,
                        M=1.05 * max(energies) if energies else thr.M,
                        truth=truth, warnings=warns)
    return spec


# ---------------------------------------------------------------------------
# neck energies
# ---------------------------------------------------------------------------

def neck_energy(spec: SequenceSpec, record: BubbleRecord,
                K_window: float = 10.0, eta_window: float = 0.25) -> float:
    """p_k-energy of u_k on B(a_k, eta) minus B(a_k, K*lambda_k), final k."""
    k = record.final_k()
    i = spec.ks.index(k)
    u = spec.maps[i]
    a, lam = record.centers[k], record.scales[k]
    inner = K_window * lam
    if inner >= eta_window:
        return 0.0
    sel = annulus_mask(u.grid, AnnulusSpec(a, inner, eta_window))
    met = MetricField.make_euclidean(u.grid)
    rep = p_energy(u, met, spec.ps[i])
    return float(np.dot(rep.density[sel], met.weights()[sel]))


def neck_oscillation(spec: SequenceSpec, record: BubbleRecord,
                     K_window: float = 10.0, eta_window: float = 0.25) -> float:
    """|mean of u_k on the outer collar - mean on the inner collar| of the
    neck annulus; small when the neck carries little energy."""
    k = record.final_k()
    i = spec.ks.index(k)
    u = spec.maps[i]
    a, lam = record.centers[k], record.scales[k]
    inner = K_window * lam
    if inner >= eta_window:
        return 0.0
    grid = u.grid
    inner_c = annulus_mask(grid, AnnulusSpec(a, inner, 2.0 * inner))
    outer_c = annulus_mask(grid, AnnulusSpec(a, 0.5 * eta_window, eta_window))
    if not inner_c.any() or not outer_c.any():
        return 0.0
    return float(np.linalg.norm(u.values[outer_c].mean(axis=0)
                                - u.values[inner_c].mean(axis=0)))


# ---------------------------------------------------------------------------
# boundary degree
# ---------------------------------------------------------------------------

def degree(m: DiscreteMap, component: str = "full", min_norm: float = 0.5):
    """Topological degree of the normalized boundary trace (d = n only).

    n = 2: summed angle increments along the ordered boundary loop / 2pi.
    n = 3: summed signed solid angles of the normalized trace over a
    triangulation of the boundary nodes / 4pi.
    Returns (integer, raw); raises UnresolvedDegree when the raw value is
    further than 0.1 from an integer.
    """
    grid = m.grid
    if m.d != grid.n:
        raise ValueError(f"degree needs d = n, got d={m.d}, n={grid.n}")
    if grid.n == 2:
        loop = _boundary_loop_2d(grid, component)
        vals = m.values[loop]
        norms = np.linalg.norm(vals, axis=1)
        if norms.min() < min_norm:
            raise ValueError(
                f"|u| = {norms.min():g} < {min_norm:g} on the boundary trace")
        ang = np.arctan2(vals[:, 1], vals[:, 0])
        inc = np.diff(np.concatenate([ang, ang[:1]]))
        inc = (inc + np.pi) % (2.0 * np.pi) - np.pi
        raw = float(inc.sum() / (2.0 * np.pi))
    elif grid.n == 3:
        raw = _degree_3d(m, component)
    else:
        raise NotImplementedError("degree implemented for n = 2 and n = 3")
    rounded = int(round(raw))
    if abs(raw - rounded) > 0.1:
        raise UnresolvedDegree(raw)
    return rounded, raw


def _boundary_loop_2d(grid: HalfBallGrid, component: str) -> np.ndarray:
    coords = grid.coords
    sphere = np.flatnonzero(grid.mask == MASK_SPHERE)
    if grid.half:
        flat = np.flatnonzero(grid.mask == MASK_FLAT)
        flat = flat[np.argsort(coords[flat, 0], kind="stable")]
        ang = np.arctan2(coords[sphere, 1], coords[sphere, 0])
        sphere = sphere[np.argsort(ang, kind="stable")]
        if component == "flat":
            return flat
        if component == "sphere":
            return sphere
        return np.concatenate([flat, sphere])
    ang = np.arctan2(coords[sphere, 1], coords[sphere, 0])
    return sphere[np.argsort(ang, kind="stable")]


def _degree_3d(m: DiscreteMap, component: str) -> float:
    from scipy.spatial import ConvexHull
    grid = m.grid
    if component != "full":
        raise ValueError("n = 3 degree is computed over the full boundary")
    bnd = np.flatnonzero((grid.mask == MASK_SPHERE)
                         | (grid.mask == MASK_FLAT))
    pts = grid.coords[bnd]
    hull = ConvexHull(pts)
    vals = m.values[bnd]
    norms = np.linalg.norm(vals, axis=1)
    if norms.min() < 0.5:
        raise ValueError(f"|u| = {norms.min():g} < 1/2 on the boundary trace")
    unit = vals / norms[:, None]
    tot = 0.0
    centroid = pts[hull.vertices].mean(axis=0)
    for s, eq in zip(hull.simplices, hull.equations):
        tri = s
        # orient the simplex so its normal points away from the hull centroid
        v0, v1, v2 = pts[tri]
        nrm = np.cross(v1 - v0, v2 - v0)
        if np.dot(nrm, v0 - centroid) < 0:
            tri = tri[[0, 2, 1]]
        u1, u2, u3 = unit[tri]
        num = float(np.dot(u1, np.cross(u2, u3)))
        den = 1.0 + float(np.dot(u1, u2) + np.dot(u2, u3) + np.dot(u3, u1))
        tot += 2.0 * math.atan2(num, den)
    return tot / (4.0 * math.pi)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def write_report(obj: dict, path) -> None:
    """Deterministic JSON: sorted keys, repr-exact floats."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
