"""Tests for profile shooting, certification, and tail fitting."""

import numpy as np
import pytest

from kslab.errors import BracketError, DomainError
from kslab.grids import make_grid
from kslab.profiles import (BLOWUP, DECAY_LIKE, OVERSHOOT, find_profile,
                            phi0_exact, shoot_profile, stationary_residual,
                            tail_fit, u0_exact)


# -- closed-form ground profile ----------------------------------------------


def test_phi0_exact_center_and_tail(grid, profile0):
    assert profile0.a_n == 1.0
    assert profile0.samples[0] == 1.0
    assert profile0.tail_c == 2.0
    # r^2 Phi0 = 2 r^2/(2+r^2) -> 2; at r_max = 30 the gap is 4/(2+900)
    assert abs(grid.r[-1] ** 2 * profile0.samples[-1] - 2.0) < 5e-3
    assert np.all(profile0.samples > 0.0)


def test_phi0_exact_residual(profile0):
    assert profile0.residual_sup <= 1e-8


def test_stationary_residual_on_ground_profile(grid, profile0):
    res = stationary_residual(profile0.samples, grid)
    assert np.abs(res).max() <= 1e-8


def test_stationary_residual_constant_sixth(grid):
    res = stationary_residual(np.full(grid.n, 1.0 / 6.0), grid)
    assert np.abs(res).max() <= 1e-9


def test_stationary_residual_constant_one(grid):
    res = stationary_residual(np.ones(grid.n), grid)
    assert np.abs(res - 5.0).max() <= 1e-9


# -- shooting ----------------------------------------------------------------


def test_shoot_exact_parameter_short_range(grid):
    # before the truncation-seeded e^{r^2/4} mode can grow, the shot at the
    # exact center value reproduces the closed form
    out = shoot_profile(1.0, r_max=8.0)
    assert out.classification == DECAY_LIKE
    r = np.linspace(2e-3, 8.0, 200)
    phi = out.sol(r)[0]
    assert np.abs(phi - 2.0 / (2.0 + r**2)).max() <= 1e-6
    assert abs(8.0**2 * out.sol(8.0)[0] - 2.0 * 64.0 / 66.0) <= 1e-4


def test_shoot_constant_solution():
    # a = 1/6 solves the equation exactly; r^2 Phi = r^2/6 grows without
    # bound, which the classifier reports as the blowup branch
    out = shoot_profile(1.0 / 6.0)
    assert out.classification == BLOWUP
    assert abs(out.sol(3.0)[0] - 1.0 / 6.0) <= 1e-9
    assert abs(out.sol(3.0)[1]) <= 1e-9


def test_shoot_rejects_nonpositive_center():
    with pytest.raises(DomainError):
        shoot_profile(0.0)
    with pytest.raises(DomainError):
        shoot_profile(-1.0)


def test_shoot_transition_is_transversal():
    lo = shoot_profile(1.0 - 1e-6)
    hi = shoot_profile(1.0 + 1e-6)
    assert lo.classification == BLOWUP
    assert hi.classification == OVERSHOOT


def test_shoot_series_start_matches_closed_form():
    out = shoot_profile(1.0, r_max=8.0)
    # right after the series launch the trajectory must carry the exact
    # Taylor data of 2/(2+r^2) = 1 - r^2/2 + r^4/4 - ...
    r = 2e-3
    phi, dphi = out.sol(r)
    assert abs(phi - 2.0 / (2.0 + r**2)) <= 1e-12
    assert abs(dphi - (-4.0 * r / (2.0 + r**2) ** 2)) <= 1e-10


# -- find_profile ------------------------------------------------------------


def test_find_ground_profile(grid):
    prof = find_profile(0, (0.5, 2.0), grid)
    assert abs(prof.a_n - 1.0) <= 1e-6
    assert prof.residual_sup <= 1e-6
    assert np.all(prof.samples > 0.0)
    assert 0.0 < prof.tail_c <= 2.0
    assert "bracket" in prof.meta and "bisection_steps" in prof.meta


def test_found_ground_profile_matches_closed_form(grid, profile0_shot,
                                                  profile0):
    assert abs(profile0_shot.a_n - 1.0) <= 1e-6
    assert np.abs(profile0_shot.samples - profile0.samples).max() <= 1e-6


def test_find_profile_rejects_zero_tolerance(grid):
    with pytest.raises(DomainError):
        find_profile(0, (0.5, 2.0), grid, tol=0.0)


def test_find_profile_rejects_bad_bracket(grid):
    with pytest.raises(DomainError):
        find_profile(0, (2.0, 0.5), grid)
    with pytest.raises(DomainError):
        find_profile(0, (-1.0, 2.0), grid)


def test_find_profile_no_transition(grid):
    # (2, 3) lies strictly between the ground and first excited center
    # values; every shot overshoots, so there is nothing to bisect
    with pytest.raises(BracketError):
        find_profile(0, (2.0, 3.0), grid, scan_points=12)


def test_first_excited_profile_fixtures(profile1):
    assert abs(profile1.a_n - 302.39298) <= 1e-3
    assert profile1.residual_sup <= 1e-6
    assert np.all(profile1.samples > 0.0)
    assert 0.0 < profile1.tail_c <= 2.0
    assert abs(profile1.tail_c - 0.826955) <= 1e-3
    assert profile1.a_n > 1.0
    assert profile1.samples[0] == pytest.approx(profile1.a_n, rel=1e-9)


def test_excited_profile_dips_below_ground_scale(profile1):
    # the excited profile has an interior layer: it starts two orders of
    # magnitude above the ground profile and crosses far below 1 outside it
    assert profile1.samples[0] > 100.0
    assert profile1.samples.min() < 0.1


# -- tail fit ----------------------------------------------------------------


def test_tail_fit_ground_profile(grid, profile0):
    c, rms = tail_fit(profile0.samples, grid, window=(10.0, 20.0))
    assert abs(c - 2.0) <= 1e-3
    assert rms < 1e-3


def test_tail_fit_exact_inverse_square(grid):
    v = np.zeros(grid.n)
    v[1:] = 2.0 / grid.r[1:] ** 2
    c, rms = tail_fit(v, grid, window=(10.0, 20.0))
    assert abs(c - 2.0) <= 1e-10
    assert rms <= 1e-10


def test_tail_fit_rejects_zero_field(grid):
    with pytest.raises(DomainError):
        tail_fit(np.zeros(grid.n), grid)


def test_tail_fit_rejects_growing_mode(grid):
    with pytest.raises(DomainError):
        tail_fit(np.exp(grid.r**2 / 8.0) / (1.0 + grid.r**2), grid)


def test_tail_fit_rejects_bad_window(grid, profile0):
    with pytest.raises(DomainError):
        tail_fit(profile0.samples, grid, window=(10.0, 40.0))
    with pytest.raises(DomainError):
        tail_fit(profile0.samples, grid, window=(10.0, 10.01))


# -- original-variables density ----------------------------------------------


def test_u0_exact_values(grid):
    u = u0_exact(grid)
    assert u[0] == 6.0
    assert np.all(u > 0.0)
    # u0 = 6 Phi0 + 2 r Phi0' pointwise
    p = 2.0 / (2.0 + grid.r**2)
    dp = -4.0 * grid.r / (2.0 + grid.r**2) ** 2
    assert np.abs(u - (6.0 * p + 2.0 * grid.r * dp)).max() <= 1e-12
