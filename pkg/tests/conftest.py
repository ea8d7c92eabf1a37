import numpy as np
import pytest

from btlab.geometry import MetricField, make_grid


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.PCG64(12345))


@pytest.fixture
def half_grid():
    return make_grid(2, 1.0, 1.0 / 16.0, half=True)


@pytest.fixture
def full_grid():
    return make_grid(2, 1.0, 1.0 / 16.0, half=False)


@pytest.fixture
def euclid(half_grid):
    return MetricField.make_euclidean(half_grid)


def random_smooth_values(grid, d, rng, amplitude=0.3):
    """Unit constant plus a few low-frequency cosine modes; smooth and small."""
    base = np.zeros(d)
    base[0] = 1.0
    vals = np.tile(base, (grid.num_lattice, 1))
    x = grid.coords
    for i in range(3):
        for j in range(3):
            mode = np.cos(i * np.pi * x[:, 0]) * np.cos(j * np.pi * x[:, -1])
            vals += rng.normal(size=d) * (amplitude / 9.0) * mode[:, None]
    vals[~grid.inside] = 0.0
    return vals
