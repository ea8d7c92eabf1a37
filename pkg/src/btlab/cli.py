"""Experiment runner: parses flat key-value configs, dispatches the named
experiment, and emits deterministic JSON reports plus CSV plot data.

Exit codes: 0 success, 2 incomplete extraction (generation cap hit with
concentration remaining), 1 error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import Thresholds
from .geometry import AnnulusSpec, MetricField, make_grid
from .maps import (DiscreteMap, constant_map, from_function, p_energy,
                   read_map, renormalize_flat, weak_residual, write_map)


class ConfigError(ValueError):
    pass


def _bool(s):
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip() != ""]


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip() != ""]


# allowed sections/keys with value parsers; unknown entries are rejected
SCHEMA = {
    "grid": {"n": int, "r": float, "h": float, "half": _bool},
    "solver": {"p": float, "residual_tol": float, "max_iters": int,
               "delta_min": float, "free_sphere": _bool},
    "thresholds": {"eps_b": float, "eps_0": float, "eps_s": float,
                   "M": float, "sep_threshold": float,
                   "window_radius": float, "max_generations": int,
                   "detect_radius_frac": float, "min_scale_factor": float,
                   "bisection_tol": float},
    "sequence": {"k_min": int, "k_max": int, "alpha_rule": str,
                 "bubbles": int, "mobius_a": _floats, "center": _floats,
                 "grid_factor": float},
    "sweep": {"n_values": _ints, "h": float, "a_values": _floats},
    "gap": {"count": int, "amplitude": float},
    "solve": {"init": str, "input": str, "d": int},
    "degree": {"input": str},
    "neck": {"K": float, "eta": float},
    "annulus": {"r_inner": float, "r_outer": float, "a": _floats,
                "b": _floats, "p": float},
}

ALPHA_RULES = {
    "zero": lambda k: 0.0,
    "inverse_k": lambda k: 1.0 / k,
}


def parse_config(path) -> dict:
    """Flat `key = value` lines under `[section]` headers; `#` comments.
    Strict: unknown sections or keys raise with the line number."""
    out = {}
    section = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(
                        f"{path}:{lineno}: unknown section [{section}]")
                out.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected `key = value`, got {line!r}")
            if section is None:
                raise ConfigError(
                    f"{path}:{lineno}: key outside any [section]")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            try:
                out[section][key] = SCHEMA[section][key](val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for "
                                  f"{key!r}: {exc}") from exc
    return out


def _thresholds(cfg, n) -> Thresholds:
    kw = dict(cfg.get("thresholds", {}))
    return Thresholds(n, **kw)


def _out_path(args, name):
    import os
    os.makedirs(args.out, exist_ok=True)
    return f"{args.out}/{name}"


def _write_report(args, name, obj):
    from .bubbletree import write_report
    write_report(obj, _out_path(args, name))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve(args, cfg):
    from .solver import SolveConfig, minimize_free_boundary
    g = cfg.get("grid", {})
    grid = make_grid(g.get("n", 2), g.get("r", 1.0), g.get("h", 1.0 / 32),
                     g.get("half", True))
    s = cfg.get("solver", {})
    sc = SolveConfig(p=s.get("p", float(grid.n)),
                     residual_tol=s.get("residual_tol", 1e-4),
                     max_iters=s.get("max_iters", 20000),
                     delta_min=s.get("delta_min", 1e-6))
    so = cfg.get("solve", {})
    if so.get("init", "random") == "file":
        init = read_map(so["input"])
    else:
        d = so.get("d", grid.n)
        rng = np.random.default_rng(np.random.PCG64(args.seed))
        init = _random_admissible(grid, d, rng, amplitude=0.3)
    metric = MetricField.make_euclidean(grid)
    u, log = minimize_free_boundary(init, metric, sc,
                                    fix_spherical=s.get("free_sphere", False)
                                    is False)
    rep = p_energy(u, metric, sc.p)
    _, res = weak_residual(DiscreteMap(grid, u.values), metric, sc.p,
                           fix_spherical=not s.get("free_sphere", False))
    osc = float(np.max(np.ptp(u.values[grid.inside], axis=0)))
    write_map(u, _out_path(args, "solution.map"))
    log.to_csv(_out_path(args, "convergence.csv"))
    _write_report(args, "solve.json", {
        "energy": rep.total, "residual": res,
        "iterations": log.rows[-1][0] if log.rows else 0,
        "oscillation": osc, "constant": bool(osc <= 1e-3)})
    return 0


def _random_admissible(grid, d, rng, amplitude):
    """Smooth low-energy admissible map: unit constant plus a few random
    low-frequency modes, renormalized on the flat face."""
    base = np.zeros(d)
    base[0] = 1.0
    coef = rng.normal(size=(3, 3, d)) * amplitude / 9.0
    x = grid.coords
    vals = np.tile(base, (grid.num_lattice, 1))
    for i in range(3):
        for j in range(3):
            mode = np.cos(i * np.pi * x[:, 0]) * np.cos(j * np.pi * x[:, -1])
            vals += coef[i, j] * mode[:, None]
    vals[~grid.inside] = 0.0
    renormalize_flat(vals, grid)
    return DiscreteMap(grid, vals)


def _sweep_entry(task):
    n, a_mag, h = task
    from .analytic import sample_mobius
    grid = make_grid(n, 1.0, h, half=False)
    a = np.zeros(n)
    a[0] = a_mag
    m = sample_mobius(grid, a)
    e = p_energy(m, MetricField.make_euclidean(grid), float(n)).total
    return {"n": n, "a": a_mag, "energy": e}


def cmd_mobius_sweep(args, cfg):
    sw = cfg.get("sweep", {})
    ns = sw.get("n_values", [2])
    amps = sw.get("a_values", [0.0, 0.3, 0.6, 0.9])
    h = sw.get("h", 1.0 / 64)
    tasks = [(n, a, h) for n in ns for a in amps]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_entry, tasks))
    else:
        rows = [_sweep_entry(t) for t in tasks]
    spreads = {}
    for n in ns:
        es = [r["energy"] for r in rows if r["n"] == n]
        spreads[str(n)] = (max(es) - min(es)) / min(es)
    _write_report(args, "mobius-sweep.json",
                  {"rows": rows, "max_relative_spread": spreads})
    return 0


def _sequence_from_config(cfg, seed):
    from .bubbletree import SyntheticBubble, make_synthetic_sequence
    sq = cfg.get("sequence", {})
    n = cfg.get("grid", {}).get("n", 2)
    k_min, k_max = sq.get("k_min", 3), sq.get("k_max", 5)
    rule = sq.get("alpha_rule", "zero")
    if rule not in ALPHA_RULES:
        raise ConfigError(f"unknown alpha_rule {rule!r}")
    a_m = np.array(sq.get("mobius_a", [0.0] * n))
    center = np.array(sq.get("center", [0.0] * n))
    nb = sq.get("bubbles", 1)
    bubbles = [SyntheticBubble(a_m, lambda k: center, lambda k: 2.0 ** -k)]
    if nb >= 2:
        bubbles.append(SyntheticBubble(a_m, lambda k: center,
                                       lambda k: 2.0 ** (-2 * k)))
    return make_synthetic_sequence(
        n, range(k_min, k_max + 1), bubbles,
        alpha_rule=ALPHA_RULES[rule],
        grid_factor=sq.get("grid_factor", 8.0))


def cmd_extract(args, cfg):
    from .bubbletree import concentration_function, extract_tree
    spec = _sequence_from_config(cfg, args.seed)
    thr = _thresholds(cfg, spec.n)
    records, ledger = extract_tree(spec, thr)
    _write_report(args, "extract.json", ledger.to_dict(records))
    ledger.defect_csv(_out_path(args, "defect.csv"))
    for k, m, p in zip(spec.ks, spec.maps, spec.ps):
        radii = np.linspace(0.0, 0.5, 11)[1:]
        prof = concentration_function(
            m, MetricField.make_euclidean(m.grid), p, radii)
        prof.to_csv(_out_path(args, f"profile_k{k}.csv"))
    return 2 if ledger.incomplete else 0


def cmd_verify_identity(args, cfg):
    from .bubbletree import extract_tree
    spec = _sequence_from_config(cfg, args.seed)
    thr = _thresholds(cfg, spec.n)
    records, ledger = extract_tree(spec, thr)
    doc = ledger.to_dict(records)
    doc["identity"] = {
        "lhs_E_total": ledger.e_total,
        "rhs_E_weak": ledger.e_weak,
        "rhs_bubble_sum": sum(ls * en for ls, en in ledger.bubbles),
        "defect": ledger.defect,
        "relative_defect": ledger.defect / ledger.e_total
        if ledger.e_total else 0.0}
    _write_report(args, "verify-identity.json", doc)
    ledger.defect_csv(_out_path(args, "defect.csv"))
    return 2 if ledger.incomplete else 0


def cmd_gap_test(args, cfg):
    from .solver import SolveConfig, minimize_free_boundary
    g = cfg.get("grid", {})
    grid = make_grid(g.get("n", 2), g.get("r", 1.0), g.get("h", 1.0 / 32),
                     g.get("half", True))
    n = grid.n
    thr = _thresholds(cfg, n)
    gap = cfg.get("gap", {})
    count = gap.get("count", 20)
    metric = MetricField.make_euclidean(grid)
    sc = SolveConfig(p=float(n),
                     residual_tol=cfg.get("solver", {}).get("residual_tol",
                                                            1e-6))
    threshold = (thr.eps_b / 2.0) ** n
    rng = np.random.default_rng(np.random.PCG64(args.seed))
    rows = []
    all_const = True
    for i in range(count):
        init = _random_admissible(grid, n, rng,
                                  amplitude=gap.get("amplitude", 0.3))
        e0 = p_energy(init, metric, float(n)).total
        if e0 >= threshold:
            init = DiscreteMap(grid, _shrink_to_threshold(
                init, grid, metric, n, threshold))
            e0 = p_energy(init, metric, float(n)).total
        u, _ = minimize_free_boundary(init, metric, sc, fix_spherical=False)
        osc = float(np.max(np.ptp(u.values[grid.inside], axis=0)))
        rows.append({"seed_index": i, "initial_energy": e0,
                     "oscillation": osc, "constant": bool(osc <= 1e-3)})
        all_const = all_const and rows[-1]["constant"]
    _write_report(args, "gap-test.json", {
        "threshold": threshold, "runs": rows, "constant": all_const})
    return 0


def _shrink_to_threshold(init, grid, metric, n, threshold):
    """Damp the non-constant part until the n-energy is below threshold."""
    mean = init.values[grid.inside].mean(axis=0)
    mean /= np.linalg.norm(mean)
    vals = init.values.copy()
    for _ in range(60):
        e = p_energy(DiscreteMap(grid, vals), metric, float(n)).total
        if e < threshold:
            return vals
        vals[grid.inside] = mean + 0.5 * (vals[grid.inside] - mean)
        renormalize_flat(vals, grid)
    return vals


def cmd_degree(args, cfg):
    from .bubbletree import degree
    m = read_map(cfg["degree"]["input"])
    integer, raw = degree(m)
    _write_report(args, "degree.json", {"degree": integer, "raw": raw})
    return 0


def cmd_neck(args, cfg):
    from .bubbletree import extract_tree, neck_energy, neck_oscillation
    spec = _sequence_from_config(cfg, args.seed)
    thr = _thresholds(cfg, spec.n)
    records, ledger = extract_tree(spec, thr)
    nk = cfg.get("neck", {})
    K, eta = nk.get("K", 10.0), nk.get("eta", 0.25)
    rows = [{"generation": rec.generation,
             "neck_energy": neck_energy(spec, rec, K, eta),
             "oscillation": neck_oscillation(spec, rec, K, eta)}
            for rec in records]
    _write_report(args, "neck.json", {"K": K, "eta": eta, "necks": rows})
    return 2 if ledger.incomplete else 0


COMMANDS = {
    "solve": cmd_solve,
    "mobius-sweep": cmd_mobius_sweep,
    "extract": cmd_extract,
    "verify-identity": cmd_verify_identity,
    "gap-test": cmd_gap_test,
    "degree": cmd_degree,
    "neck": cmd_neck,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="btlab",
        description="free-boundary energy lab: solve, sweep, extract, verify")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None,
                        help="flat key-value config file")
    parser.add_argument("--out", default=".", help="report directory")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the PCG64 generator")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else {}
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:                      # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
