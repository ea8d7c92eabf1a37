import numpy as np
import pytest

from btlab.geometry import MASK_FLAT, MetricField, make_grid
from btlab.maps import (DegenerateProjectionError, DiscreteMap, MapError,
                        constant_map, energy_gradient, from_function,
                        is_admissible, local_energy, max_principle_check,
                        p_energy, read_map, renormalize_flat,
                        tangential_project, weak_residual, write_map)
from conftest import random_smooth_values


def test_constant_map_has_zero_energy(half_grid, euclid):
    m = constant_map(half_grid, [1.0, 0.0, 0.0])
    rep = p_energy(m, euclid, 2.0)
    assert rep.total == 0.0
    assert np.all(rep.density == 0.0)


def test_linear_map_energy_matches_closed_form():
    # u(x) = A x has |du|^2 = |A|_F^2 everywhere; E_p = |A|_F^p * vol
    grid = make_grid(2, 1.0, 1.0 / 64.0, half=True)
    met = MetricField.make_euclidean(grid)
    A = np.array([[0.7, 0.1], [-0.3, 0.4]])
    m = from_function(grid, lambda x: x @ A.T)
    for p in (2.0, 3.0):
        e = p_energy(m, met, p).total
        exact = np.sum(A * A) ** (p / 2.0) * np.pi / 2.0
        assert e == pytest.approx(exact, rel=2e-2)


def test_p_energy_validates_inputs(half_grid, euclid):
    m = constant_map(half_grid, [1.0, 0.0])
    with pytest.raises(MapError):
        p_energy(m, euclid, 1.5)
    with pytest.raises(MapError):
        DiscreteMap(half_grid, np.zeros((3, 2)))


def test_local_energy_partitions_total(half_grid, euclid, rng):
    m = DiscreteMap(half_grid, random_smooth_values(half_grid, 2, rng))
    total = p_energy(m, euclid, 2.0).total
    inner = local_energy(m, euclid, 2.0, np.zeros(2), 0.5)
    assert 0.0 < inner < total
    assert local_energy(m, euclid, 2.0, np.zeros(2), 10.0) \
        == pytest.approx(total)
    assert local_energy(m, euclid, 2.0, np.zeros(2), 0.0) == 0.0


def test_admissibility_and_renormalize(half_grid):
    vals = np.tile([1.3, 0.4], (half_grid.num_lattice, 1))
    vals[~half_grid.inside] = 0.0
    m = DiscreteMap(half_grid, vals)
    assert not is_admissible(m)
    renormalize_flat(m.values, half_grid)
    assert is_admissible(m)
    flat = half_grid.mask == MASK_FLAT
    assert np.allclose(np.linalg.norm(m.values[flat], axis=1), 1.0)


def test_renormalize_rejects_zero(half_grid):
    vals = np.zeros((half_grid.num_lattice, 2))
    with pytest.raises(DegenerateProjectionError):
        renormalize_flat(vals, half_grid)


def test_tangential_project_orthogonality(rng):
    u = rng.normal(size=(30, 3)) + np.array([2.0, 0.0, 0.0])
    v = rng.normal(size=(30, 3))
    t = tangential_project(u, v)
    assert np.allclose(np.einsum("xc,xc->x", t, u), 0.0, atol=1e-12)
    # projecting twice changes nothing
    assert np.allclose(tangential_project(u, t), t, atol=1e-12)


def test_energy_gradient_matches_finite_differences(half_grid, euclid, rng):
    """The assembled gradient is the exact derivative of the quadrature sum."""
    vals = random_smooth_values(half_grid, 2, rng)
    m = DiscreteMap(half_grid, vals)
    p, delta = 2.5, 1e-2

    def reg_energy(v):
        rep = p_energy(DiscreteMap(half_grid, v), euclid, 2.0)
        dens = (rep.density + delta ** 2) ** (p / 2.0) - delta ** p
        dens[~half_grid.inside] = 0.0
        return float(np.dot(dens, euclid.weights()))

    G = energy_gradient(m, euclid, p, delta)
    eps = 1e-6
    nodes = rng.choice(np.flatnonzero(half_grid.inside), size=5, replace=False)
    for x in nodes:
        for c in range(2):
            vp = vals.copy(); vp[x, c] += eps
            vm = vals.copy(); vm[x, c] -= eps
            fd = (reg_energy(vp) - reg_energy(vm)) / (2 * eps)
            assert G[x, c] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_weak_residual_vanishes_for_constants(half_grid, euclid):
    m = constant_map(half_grid, [0.0, 1.0])
    res, norm = weak_residual(m, euclid, 2.0, fix_spherical=False)
    assert norm == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(res, 0.0)


def test_weak_residual_projection_structure(half_grid, euclid, rng):
    m = DiscreteMap(half_grid, random_smooth_values(half_grid, 2, rng))
    renormalize_flat(m.values, half_grid)
    res, norm = weak_residual(m, euclid, 2.0, fix_spherical=True)
    assert norm > 0
    flat = half_grid.mask == MASK_FLAT
    assert np.allclose(np.einsum("xc,xc->x", res[flat], m.values[flat]),
                       0.0, atol=1e-10)
    from btlab.geometry import MASK_SPHERE
    assert np.all(res[half_grid.mask == MASK_SPHERE] == 0.0)


def test_max_principle_check(half_grid):
    ok, _, worst = max_principle_check(constant_map(half_grid, [0.6, 0.8]))
    assert ok and worst == pytest.approx(1.0)
    bad = constant_map(half_grid, [1.2, 0.0])
    ok, _, worst = max_principle_check(bad)
    assert not ok and worst == pytest.approx(1.2)


def test_map_file_roundtrip(tmp_path, half_grid, rng):
    m = DiscreteMap(half_grid, random_smooth_values(half_grid, 3, rng))
    path = tmp_path / "u.map"
    write_map(m, path)
    back = read_map(path)
    assert back.grid.descriptor() == half_grid.descriptor()
    assert np.array_equal(back.values, m.values)  # bit-exact


def test_read_map_rejects_corruption(tmp_path, half_grid):
    m = constant_map(half_grid, [1.0, 0.0])
    path = tmp_path / "u.map"
    write_map(m, path)
    text = path.read_text().splitlines()
    (tmp_path / "bad1.map").write_text("WRONG\n" + "\n".join(text[1:]) + "\n")
    with pytest.raises(MapError):
        read_map(tmp_path / "bad1.map")
    broken = text[:2] + [text[2] + " 3.0"] + text[3:]
    (tmp_path / "bad2.map").write_text("\n".join(broken) + "\n")
    with pytest.raises(MapError):
        read_map(tmp_path / "bad2.map")
