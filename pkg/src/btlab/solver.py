"""Energy minimization: the constrained free-boundary problem and
unconstrained extensions on annuli.

The degenerate density |du|^p is regularized as (|du|^2 + delta^2)^{p/2} -
delta^p and delta is driven down a continuation schedule.  Descent is
projected gradient with Barzilai-Borwein step proposals and monotone Armijo
backtracking; flat-boundary nodes are renormalized onto the unit sphere after
every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import (MASK_FLAT, MASK_SPHERE, AnnulusSpec, HalfBallGrid,
                       MetricField, annulus_mask, make_grid)
from .maps import (DiscreteMap, energy_gradient, gradient, p_energy,
                   renormalize_flat, tangential_project, weak_residual)


class SolveError(RuntimeError):
    """Non-convergence diagnostic carrying the residual history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class SolveConfig:
    p: float
    delta_min: float = 1e-6
    schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4)
    residual_tol: float = 1e-4
    max_iters: int = 20000
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    check_every: int = 20

    def __post_init__(self):
        if self.residual_tol <= 0:
            raise ValueError("residual_tol must be positive")
        if list(self.schedule) != sorted(self.schedule, reverse=True):
            raise ValueError("continuation schedule must be strictly decreasing")

    @property
    def deltas(self) -> tuple:
        return tuple(self.schedule) + (self.delta_min,)


@dataclass
class ConvergenceLog:
    rows: list = field(default_factory=list)   # (iter, delta, energy, residual, step)

    def append(self, it, delta, energy, residual, step):
        self.rows.append((int(it), float(delta), float(energy),
                          float(residual), float(step)))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,delta,energy,residual,step\n")
            for row in self.rows:
                fh.write("{},{!r},{!r},{!r},{!r}\n".format(*row))

    def energies(self):
        return [r[2] for r in self.rows]

    def residuals(self):
        return [r[3] for r in self.rows]


def _reg_energy(values, grid, metric, p, delta):
    nbr_p, nbr_m, scheme = grid.neighbor_tables()
    grad = kernels.gradient_op(values, nbr_p, nbr_m, scheme, 1.0 / grid.h)
    e = kernels.energy_density_sq(grad, metric.ginv)
    dens = (e + delta * delta) ** (p / 2.0) - delta ** p
    dens[~grid.inside] = 0.0
    return float(np.dot(dens, metric.weights()))


def _descend(values, grid, metric, config, free, flat_constrained,
             log, residual_fn):
    """Projected nonlinear conjugate gradient over the delta continuation.
    Polak-Ribiere directions with automatic restarts, Armijo backtracking
    from a quadratic-fit step.  Mutates and returns `values`; stops once
    `residual_fn` reports convergence at the final delta."""
    w = metric.weights()
    wpos = w > 0
    it = 0
    flat_idx = np.flatnonzero(flat_constrained)

    def steepest(G):
        S = np.zeros_like(G)
        S[wpos] = -G[wpos] / w[wpos, None]
        if flat_idx.size:
            S[flat_idx] = tangential_project(values[flat_idx], S[flat_idx])
        S[~free] = 0.0
        return S

    def renorm(trial):
        if flat_idx.size:
            norms = np.linalg.norm(trial[flat_idx], axis=1)
            if norms.min() < 1e-12:
                return False
            trial[flat_idx] /= norms[:, None]
        return True

    for stage, delta in enumerate(config.deltas):
        last = stage == len(config.deltas) - 1
        energy = _reg_energy(values, grid, metric, config.p, delta)
        step = config.initial_step
        D = None
        prev_G = prev_S = None
        since_restart = 0
        while it < config.max_iters:
            G = energy_gradient(DiscreteMap(grid, values), metric, config.p,
                                delta)
            S = steepest(G)
            if D is None or since_restart >= 200:
                D = S.copy()
                since_restart = 0
            else:
                # preconditioned Polak-Ribiere+ with automatic restart
                yk = G - prev_G
                denom = -float(np.einsum("xc,xc->", prev_S, prev_G))
                beta = float(np.einsum("xc,xc->", S, yk)) / denom \
                    if denom > 0 else 0.0
                beta = max(0.0, -beta)
                D = S + beta * D
                if flat_idx.size:
                    D[flat_idx] = tangential_project(values[flat_idx],
                                                     D[flat_idx])
                D[~free] = 0.0
            prev_G, prev_S = G, S
            dirder = float(np.einsum("xc,xc->", G, D))
            if dirder >= 0.0:
                if since_restart == 0:
                    break       # steepest direction is not a descent direction
                D = None
                continue
            if float(np.einsum("xc,xc->", D, D)) == 0.0:
                break
            accepted = False
            refit = False
            for _ in range(60):
                trial = values + step * D
                if not renorm(trial):
                    step *= config.backtrack
                    continue
                e_trial = _reg_energy(trial, grid, metric, config.p, delta)
                if not refit:
                    # parabola through (0, energy, dirder) and (step, e_trial)
                    curv = e_trial - energy - dirder * step
                    if curv > 0:
                        s_q = -dirder * step * step / (2.0 * curv)
                        s_q = min(max(s_q, 0.1 * step), 10.0 * step)
                        if abs(s_q - step) > 1e-3 * step:
                            step = s_q
                            refit = True
                            continue
                if e_trial <= energy + config.armijo_c * step * dirder:
                    accepted = True
                    break
                step *= config.backtrack
                refit = True
            if not accepted:
                if since_restart > 0:
                    D = None
                    continue
                break
            values = trial
            energy = e_trial
            it += 1
            since_restart += 1
            if it % config.check_every == 0 or it == 1:
                res = residual_fn(values)
                log.append(it, delta, energy, res, step)
                if last:
                    if res <= config.residual_tol:
                        return values, True, it
                elif res <= max(config.residual_tol, delta):
                    break
            step *= 2.0
    res = residual_fn(values)
    log.append(it, config.delta_min,
               _reg_energy(values, grid, metric, config.p, config.delta_min),
               res, step)
    return values, res <= config.residual_tol, it


def minimize_free_boundary(init: DiscreteMap, metric: MetricField,
                           config: SolveConfig, fix_spherical: bool = True):
    """Constrained descent: |u| = 1 enforced on flat-boundary nodes by
    renormalization; spherical-boundary values held as Dirichlet data unless
    `fix_spherical` is false.  Returns (map, ConvergenceLog); raises
    SolveError when the residual tolerance is not reached."""
    grid = init.grid
    values = init.values.copy()
    renormalize_flat(values, grid)
    free = grid.inside.copy()
    if fix_spherical:
        free &= grid.mask != MASK_SPHERE
    flat_constrained = grid.mask == MASK_FLAT
    log = ConvergenceLog()

    def residual_fn(vals):
        _, norm = weak_residual(DiscreteMap(grid, vals), metric, config.p,
                                fix_spherical=fix_spherical)
        return norm

    values, ok, it = _descend(values, grid, metric, config, free,
                              flat_constrained, log, residual_fn)
    if not ok:
        raise SolveError(
            f"no convergence within {config.max_iters} iterations "
            f"(residual {log.residuals()[-1]:g} > {config.residual_tol:g})",
            log)
    return DiscreteMap(grid, values), log


# ---------------------------------------------------------------------------
# unconstrained annulus extensions
# ---------------------------------------------------------------------------

@dataclass
class AnnulusProblem:
    """Dirichlet data on the two spherical boundaries of an annulus, zero-flux
    on the flat face (handled by even reflection), p-energy minimization.

    `inner_data` / `outer_data`: constant vectors or callables mapping an
    (N, n) array of positions (relative to the annulus center) to (N, d)
    values.  `metric_fn` builds a MetricField for the working grid (None =
    Euclidean).
    """

    spec: AnnulusSpec
    h: float
    d: int
    p: float
    inner_data: object
    outer_data: object
    metric_fn: object = None

    def data_values(self, which, pts):
        data = self.inner_data if which == "inner" else self.outer_data
        if callable(data):
            return np.asarray(data(pts), dtype=np.float64)
        vec = np.asarray(data, dtype=np.float64)
        return np.tile(vec, (len(pts), 1))


def annulus_extension(problem: AnnulusProblem, config: SolveConfig):
    """Solve the unconstrained p-harmonic Dirichlet problem on the (reflected)
    full annulus and return (map, working_grid, log).

    The working grid is a full-ball lattice centered on the annulus center;
    when the annulus is clipped to the half space, data and solution are
    evaluated at (x', |x_n|), which realizes the even reflection and makes the
    solve symmetric by construction.
    """
    spec = problem.spec
    h = problem.h
    grid = make_grid(spec.center.size, spec.r_outer + 2 * h, h, half=False)
    metric = (MetricField.make_euclidean(grid) if problem.metric_fn is None
              else problem.metric_fn(grid))
    coords = grid.coords
    if spec.clipped:
        eval_pts = coords.copy()
        eval_pts[:, -1] = np.abs(eval_pts[:, -1])
    else:
        eval_pts = coords
    dist = np.linalg.norm(coords, axis=1)
    inner = grid.inside & (dist < spec.r_inner)
    outer = grid.inside & (dist >= spec.r_outer)
    solve_nodes = grid.inside & ~inner & ~outer

    values = np.zeros((grid.num_lattice, problem.d))
    values[inner] = problem.data_values("inner", eval_pts[inner])
    values[outer] = problem.data_values("outer", eval_pts[outer])

    inner_mean = values[inner].mean(axis=0) if inner.any() else np.zeros(problem.d)
    outer_mean = values[outer].mean(axis=0) if outer.any() else np.zeros(problem.d)
    if np.allclose(values[inner | outer],
                   values[inner | outer][0] if (inner | outer).any() else 0.0):
        # identical constant data on both spheres: constants are p-harmonic
        values[solve_nodes] = values[inner | outer][0]
        return DiscreteMap(grid, values), grid, ConvergenceLog()

    # radial-logarithmic blend between the boundary means as starting guess
    lam = np.zeros(grid.num_lattice)
    ann = solve_nodes
    lam[ann] = np.log(np.maximum(dist[ann], 1e-300) / spec.r_inner) \
        / math.log(spec.r_outer / spec.r_inner)
    lam = np.clip(lam, 0.0, 1.0)
    values[ann] = inner_mean + lam[ann, None] * (outer_mean - inner_mean)

    log = ConvergenceLog()

    def residual_fn(vals):
        G = energy_gradient(DiscreteMap(grid, vals), metric, config.p)
        w = metric.weights()
        res = np.zeros_like(G)
        pos = w > 0
        res[pos] = G[pos] / w[pos, None]
        res[~solve_nodes] = 0.0
        return float(np.sqrt(np.einsum("x,xc,xc->", w, res, res)))

    no_flat = np.zeros(grid.num_lattice, dtype=bool)
    values, ok, it = _descend(values, grid, metric, config, solve_nodes,
                              no_flat, log, residual_fn)
    if spec.clipped:
        values = _symmetrize(values, grid)
    if not ok:
        raise SolveError(
            f"annulus extension did not converge (residual "
            f"{log.residuals()[-1]:g} > {config.residual_tol:g})", log)
    return DiscreteMap(grid, values), grid, log


def _symmetrize(values, grid):
    """Average values with their mirror across x_n = 0 (node-exact pairing)."""
    shape = grid.shape
    lat = values.reshape(shape + (values.shape[1],))
    lat = 0.5 * (lat + np.flip(lat, axis=grid.n - 1))
    return np.ascontiguousarray(lat.reshape(values.shape))


# ---------------------------------------------------------------------------
# comparison checks
# ---------------------------------------------------------------------------

class SmallnessViolation(RuntimeError):
    def __init__(self, measured, threshold):
        super().__init__(
            f"annulus n-energy {measured:g} exceeds the smallness threshold "
            f"{threshold:g}")
        self.measured = measured
        self.threshold = threshold


def clipped_annulus_energy(u: DiscreteMap, metric: MetricField, p: float,
                           spec: AnnulusSpec) -> float:
    sel = annulus_mask(u.grid, spec)
    rep = p_energy(u, metric, p)
    return float(np.dot(rep.density[sel], metric.weights()[sel]))


def neck_comparison(u: DiscreteMap, spec: AnnulusSpec, p: float,
                    metric: MetricField, config: SolveConfig,
                    eps_small: float = None):
    """Compare the p-energy of u on a clipped annulus against the energy of
    its unconstrained p-harmonic extension with u's own trace as Dirichlet
    data.  Refuses when the annulus n-energy exceeds eps_small^n."""
    n = u.grid.n
    if eps_small is not None:
        e_n = clipped_annulus_energy(u, metric, float(n), spec)
        if e_n > eps_small ** n:
            raise SmallnessViolation(e_n, eps_small ** n)
    e_u = clipped_annulus_energy(u, metric, p, spec)

    from .interp import map_interpolator
    interp = map_interpolator(u)

    def trace(pts):
        return interp(pts + spec.center)

    problem = AnnulusProblem(spec=spec, h=u.grid.h, d=u.d, p=p,
                             inner_data=trace, outer_data=trace)
    v, vgrid, _ = annulus_extension(problem, config)
    vmetric = MetricField.make_euclidean(vgrid)
    vspec = AnnulusSpec(np.zeros(n), spec.r_inner, spec.r_outer,
                        clipped=spec.clipped)
    e_v = clipped_annulus_energy(v, vmetric, p, vspec)
    ratio = e_u / e_v if e_v > 0 else math.inf
    return {"E_u": e_u, "E_v": e_v, "ratio": ratio}


def decoupling_check(u: DiscreteMap, v: DiscreteMap, metric: MetricField,
                     p: float):
    """Near-additivity of the p-energy under a small perturbation:
    |E_p(u+v) - E_p(u)| <= p (|du|_p + |dv|_p + 1)^{p-1} |dv|_p."""
    e_uv = p_energy(DiscreteMap(u.grid, u.values + v.values), metric, p).total
    e_u = p_energy(u, metric, p).total
    nu = e_u ** (1.0 / p)
    nv = p_energy(v, metric, p).total ** (1.0 / p)
    lhs = abs(e_uv - e_u)
    rhs = p * (nu + nv + 1.0) ** (p - 1.0) * nv
    return {"lhs": lhs, "rhs": rhs, "slack": rhs - lhs}
