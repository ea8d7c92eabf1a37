import numpy as np
import pytest

from btlab.geometry import (MASK_FLAT, MASK_INTERIOR, MASK_OUTSIDE,
                            MASK_SPHERE, AnnulusSpec, GridError, MetricField,
                            annulus_mask, ball_mask, make_grid)


def test_make_grid_rejects_bad_inputs():
    with pytest.raises(GridError):
        make_grid(1, 1.0, 0.1, half=False)
    with pytest.raises(GridError):
        make_grid(2, 1.0, 0.6, half=False)  # h > r/2
    with pytest.raises(GridError):
        make_grid(2, 1.0, -0.1, half=False)


def test_mask_partition(half_grid):
    codes = set(np.unique(half_grid.mask))
    assert codes <= {MASK_OUTSIDE, MASK_INTERIOR, MASK_FLAT, MASK_SPHERE}
    # flat nodes sit on x_n = 0 strictly inside the sphere band
    flat = half_grid.mask == MASK_FLAT
    assert np.all(np.abs(half_grid.coords[flat, -1]) < half_grid.h / 2)
    assert np.all(np.linalg.norm(half_grid.coords[flat], axis=1) < half_grid.r)
    # lower half is outside
    low = half_grid.coords[:, -1] < -half_grid.h / 2
    assert np.all(half_grid.mask[low] == MASK_OUTSIDE)


def test_quad_weights_approximate_volume():
    for n, half, exact in [(2, False, np.pi), (2, True, np.pi / 2),
                           (3, False, 4 * np.pi / 3)]:
        grid = make_grid(n, 1.0, 1.0 / 64.0, half=half)
        vol = grid.quad_weights().sum()
        assert vol == pytest.approx(exact, rel=5e-3)


def test_weights_zero_outside(half_grid):
    w = half_grid.quad_weights()
    assert np.all(w[~half_grid.inside] == 0.0)
    assert np.all(w[half_grid.inside] > 0.0)
    assert w.max() <= half_grid.h ** half_grid.n + 1e-15


def test_ball_and_annulus_masks(full_grid):
    c = np.array([0.25, 0.0])
    b = ball_mask(full_grid, c, 0.3)
    d = np.linalg.norm(full_grid.coords - c, axis=1)
    assert np.array_equal(b, (d < 0.3) & full_grid.inside)
    ann = annulus_mask(full_grid, AnnulusSpec(c, 0.1, 0.3, clipped=False))
    assert np.array_equal(ann, (d >= 0.1) & (d < 0.3) & full_grid.inside)
    # clipped annulus on a full grid keeps the upper half only
    annc = annulus_mask(full_grid, AnnulusSpec(c, 0.1, 0.3, clipped=True))
    assert np.all(full_grid.coords[annc, -1] >= -1e-12)
    assert annc.sum() < ann.sum()


def test_annulus_spec_validation():
    with pytest.raises(GridError):
        AnnulusSpec(np.zeros(2), 0.3, 0.1)
    with pytest.raises(GridError):
        AnnulusSpec(np.zeros(2), 0.0, 0.1)


def test_metric_field_euclidean_and_matrices(half_grid):
    eu = MetricField.make_euclidean(half_grid)
    assert eu.euclidean and eu.check_spd()
    x = half_grid.coords

    def g_fn(pts):
        g = np.tile(np.eye(2), (len(pts), 1, 1))
        g[:, 0, 0] = 1.0 + pts[:, 0] ** 2
        return g

    met = MetricField.from_function(half_grid, g_fn)
    assert met.check_spd()
    inside = half_grid.inside
    assert np.allclose(met.sqrt_det[inside], np.sqrt(1.0 + x[inside, 0] ** 2))
    assert np.allclose(met.ginv[inside] @ met.g[inside], np.eye(2), atol=1e-12)
    # weights pick up sqrt(det g)
    assert met.weights()[inside] == pytest.approx(
        (half_grid.quad_weights() * met.sqrt_det)[inside])


def test_metric_field_rejects_non_spd(half_grid):
    bad = np.tile(np.diag([1.0, -1.0]), (half_grid.num_lattice, 1, 1))
    with pytest.raises(Exception):
        MetricField.from_matrices(half_grid, bad)


def test_neighbor_tables_consistency(half_grid):
    nbr_p, nbr_m, scheme = half_grid.neighbor_tables()
    assert nbr_p.shape == nbr_m.shape == scheme.shape \
        == (half_grid.n, half_grid.num_lattice)
    # centered nodes have distinct neighbors on both sides
    from btlab.kernels import SCHEME_CENTERED
    cen = scheme == SCHEME_CENTERED
    for ax in range(half_grid.n):
        sel = cen[ax]
        assert np.all(nbr_p[ax, sel] != nbr_m[ax, sel])
