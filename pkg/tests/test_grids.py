"""Grids, radial operators, weighted measures, and quadrature oracles."""

import numpy as np
import pytest

from kslab.errors import DomainError
from kslab.grids import (SPHERE_AREA_5D, TailedInterpolant, build_measure,
                         gaussian_measure, inner_product, laplacian_radial,
                         lambda_op, lambda_prime_op, make_grid,
                         make_layer_grid, norm_l2, pairing_3d)


def phi0_samples(grid):
    return 2.0 / (2.0 + grid.r**2)


# -- construction ---------------------------------------------------------------


def test_small_grid_is_uniform():
    g = make_grid(r_max=2.0, n_points=21)
    assert np.allclose(g.r, np.linspace(0.0, 2.0, 21))


def test_default_grid_spacing():
    g = make_grid(r_max=30.0, n_points=4001)
    h = np.diff(g.r)
    assert abs(h[0] - 0.0075) < 1e-15
    assert h.max() - h.min() < 1e-12


def test_stretched_grid_clusters_near_origin():
    g = make_grid(r_max=10.0, n_points=101, stretch=2.0)
    h = np.diff(g.r)
    assert h[0] < h[-1]
    assert g.r[0] == 0.0 and g.r[-1] == 10.0
    assert np.all(h > 0)


def test_grid_parameter_validation():
    with pytest.raises(DomainError):
        make_grid(r_max=30.0, n_points=2)
    with pytest.raises(DomainError):
        make_grid(r_max=-1.0, n_points=11)
    with pytest.raises(DomainError):
        make_grid(r_max=10.0, n_points=11, stretch=0.5)


def test_layer_grid_invariants():
    g = make_layer_grid()
    h = np.diff(g.r)
    assert g.r[0] == 0.0
    assert abs(g.r[-1] - 30.0) < 1e-12
    assert np.all(h > 0)
    # the inner zone is finer than the outer zone
    assert h[0] < 1e-3 < h[-1]


# -- weighted measures ----------------------------------------------------------


def test_measure_unit_weight_at_origin(measure0):
    assert abs(measure0.rho[0] - 1.0) < 1e-14


def test_measure_matches_closed_form_weight(grid, measure0):
    # for the ground profile the profile-adapted weight has the closed form
    # rho_tilde = ((2+r^2)/2)^2, i.e. the inverse square of the profile
    mask = grid.r <= 20.0
    rho_tilde = np.exp(measure0.log_rho + grid.r**2 / 4.0)
    exact = ((2.0 + grid.r**2) / 2.0) ** 2
    rel = np.abs(rho_tilde[mask] / exact[mask] - 1.0)
    assert rel.max() <= 1e-8


def test_measure_requires_covering_grid(grid):
    small = make_grid(r_max=10.0, n_points=101)
    phi_small = 2.0 / (2.0 + small.r**2)

    class Carrier:
        def __init__(self):
            self.grid = small
            self.values = phi_small

    with pytest.raises(DomainError):
        build_measure(Carrier(), grid)


def test_gaussian_total_mass(grid, gauss_measure):
    total = inner_product(np.ones(grid.n), np.ones(grid.n), gauss_measure)
    exact = 32.0 * np.pi ** 2.5
    assert abs(total / exact - 1.0) <= 1e-8


def test_inner_product_zero_and_symmetry(grid, gauss_measure, rng):
    f = rng.standard_normal(grid.n)
    g = rng.standard_normal(grid.n)
    assert inner_product(np.zeros(grid.n), g, gauss_measure) == 0.0
    a = inner_product(f, g, gauss_measure)
    b = inner_product(g, f, gauss_measure)
    assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)


def test_inner_product_grid_mismatch(gauss_measure):
    # no explicit shape check: the quadrature broadcast fails
    with pytest.raises(ValueError):
        inner_product(np.ones(7), np.ones(7), gauss_measure)


# -- differential operators ------------------------------------------------------


def test_laplacian_of_r_squared(grid):
    lap = laplacian_radial(grid.r**2, grid)
    assert np.abs(lap - 10.0).max() < 1e-6


def test_laplacian_of_profile_at_origin(grid):
    lap = laplacian_radial(phi0_samples(grid), grid)
    # from the closed form, the 5-d radial laplacian at the origin is -5
    assert abs(lap[0] + 5.0) < 1e-8


def test_laplacian_of_constant(grid):
    lap = laplacian_radial(np.full(grid.n, 3.7), grid)
    # exact zero up to stencil roundoff; the origin closure divides by h^2
    assert np.abs(lap).max() < 1e-9


def test_lambda_op_closed_form(grid):
    lam = lambda_op(phi0_samples(grid), grid)
    exact = 8.0 / (2.0 + grid.r**2) ** 2
    assert abs(lam[0] - 2.0) < 1e-10
    assert np.abs(lam - exact).max() < 1e-8


def test_lambda_ops_on_simple_fields(grid):
    c = np.full(grid.n, 2.5)
    assert np.abs(lambda_op(c, grid) - 5.0).max() < 1e-10
    assert np.abs(lambda_prime_op(c, grid)).max() < 1e-10
    assert np.abs(lambda_op(grid.r**2, grid) - 4.0 * grid.r**2).max() < 1e-6


def test_second_order_convergence_of_laplacian():
    errs = []
    for n in (501, 1001):
        g = make_grid(r_max=20.0, n_points=n)
        f = np.exp(-g.r**2 / 8.0)
        exact = (g.r**2 / 16.0 - 5.0 / 4.0) * f
        errs.append(np.abs(laplacian_radial(f, g) - exact).max())
    # halving the spacing must cut the error by at least the stencil order
    assert errs[0] / errs[1] >= 3.9


def test_integration_by_parts(grid, gauss_measure):
    # (-rho^-1 (rho r^4 f')' , g)_rho = (f', g')_rho for compact bumps
    r = grid.r
    f = np.exp(-((r - 4.0) / 1.5) ** 2)
    g = np.exp(-((r - 5.0) / 2.0) ** 2)
    df = grid.d1 @ f
    dg = grid.d1 @ g
    flux = gauss_measure.rho * r**4 * df
    div = np.zeros(grid.n)
    div[1:] = (grid.d1 @ flux)[1:] / (gauss_measure.rho[1:] * r[1:] ** 4)
    div[0] = 5.0 * (grid.d2 @ f)[0]
    lhs = -inner_product(div, g, gauss_measure)
    rhs = inner_product(df, dg, gauss_measure)
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(rhs))


# -- quadrature and pairings -----------------------------------------------------


def test_cumulative_integral_polynomial(grid):
    cum = grid.cumulative_integral(grid.r**3)
    assert np.abs(cum - grid.r**4 / 4.0).max() < 1e-8


def test_pairing_3d_gaussian(grid):
    # pairing_3d carries the 5-D angular factor 8 pi^2 / 3, so for
    # u = e^{-r^2}, theta = 1 the exact value is
    # (8 pi^2 / 3) * int_0^inf r^2 e^{-r^2} dr = (8 pi^2 / 3) * sqrt(pi) / 4.
    val = pairing_3d(np.exp(-grid.r**2), np.ones(grid.n), grid)
    exact = SPHERE_AREA_5D * np.sqrt(np.pi) / 4.0
    assert abs(val - exact) <= 1e-8 * exact
    assert pairing_3d(np.zeros(grid.n), np.ones(grid.n), grid) == 0.0


def test_norm_l2_matches_inner_product(grid, gauss_measure, rng):
    f = rng.standard_normal(grid.n)
    n2 = norm_l2(f, gauss_measure) ** 2
    assert abs(n2 - inner_product(f, f, gauss_measure)) <= 1e-9 * n2


def test_tailed_interpolant_matches_nodes_and_tail(grid):
    phi = phi0_samples(grid)
    interp = TailedInterpolant(grid, phi)
    assert np.abs(interp(grid.r) - phi).max() < 1e-12
    far = np.array([35.0, 50.0])
    expected = phi[-1] * grid.r_max**2 / far**2
    assert np.allclose(interp(far), expected, rtol=1e-12)


def test_sphere_area_constant():
    assert abs(SPHERE_AREA_5D - 8.0 * np.pi**2 / 3.0) < 1e-15
