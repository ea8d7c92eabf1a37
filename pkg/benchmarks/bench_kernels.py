"""Compare the numba and numpy kernel backends on the hot paths: gradient,
energy density, flux, and adjoint assembly.

Run:  python benchmarks/bench_kernels.py [n] [h_denom]
"""

import importlib
import os
import sys
import time

import numpy as np


def bench(backend, n, h, reps=5):
    os.environ["BTLAB_BACKEND"] = backend
    for mod in [m for m in list(sys.modules) if m.startswith("btlab")]:
        del sys.modules[mod]
    import btlab.kernels as kernels
    from btlab.geometry import MetricField, make_grid
    from btlab.maps import DiscreteMap, energy_gradient, p_energy

    grid = make_grid(n, 1.0, h, half=True)
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(grid.num_lattice, n))
    vals[~grid.inside] = 0.0
    m = DiscreteMap(grid, vals)
    metric = MetricField.make_euclidean(grid)

    p_energy(m, metric, float(n))            # warm-up / jit compile
    energy_gradient(m, metric, float(n), 1e-2)

    t0 = time.perf_counter()
    for _ in range(reps):
        p_energy(m, metric, float(n))
    t_energy = (time.perf_counter() - t0) / reps

    t0 = time.perf_counter()
    for _ in range(reps):
        energy_gradient(m, metric, float(n), 1e-2)
    t_grad = (time.perf_counter() - t0) / reps
    return grid.node_count, t_energy, t_grad


def main():
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    denom = int(sys.argv[2]) if len(sys.argv) > 2 else 256
    h = 1.0 / denom
    print(f"n={n}, h=1/{denom}")
    rows = {}
    for backend in ("numpy", "numba"):
        nodes, t_e, t_g = bench(backend, n, h)
        rows[backend] = (t_e, t_g)
        print(f"  {backend:6s}: nodes={nodes}  p_energy={t_e * 1e3:8.2f} ms"
              f"  energy_gradient={t_g * 1e3:8.2f} ms")
    print(f"  speedup: p_energy x{rows['numpy'][0] / rows['numba'][0]:.1f}, "
          f"energy_gradient x{rows['numpy'][1] / rows['numba'][1]:.1f}")


if __name__ == "__main__":
    main()
