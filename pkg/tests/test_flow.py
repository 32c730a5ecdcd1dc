"""Tests for the modulated renormalized flow and the manifold shoot."""

import numpy as np
import pytest

from kslab.errors import (BracketError, DomainError, OutsideTubeError,
                          SingularModulationError)
from kslab.flow import (FlowParams, ModulationState, Trajectory,
                        blowup_extract, build_initial_state, decompose,
                        evolve, lipschitz_probe, orthogonality_residuals,
                        rhs_renormalized, shoot_stable_manifold, step)
from kslab.grids import norm_l2
from kslab.spectrum import assemble


@pytest.fixture(scope="module")
def params0(profile0, spectrum0):
    return FlowParams(n=0, profile=profile0, spectrum=spectrum0,
                      s0=6.0, ds=1e-3, s_end=8.0)


@pytest.fixture(scope="module")
def params1(profile1, spectrum1):
    return FlowParams(n=1, profile=profile1, spectrum=spectrum1,
                      s0=6.0, ds=1e-3, s_end=20.0)


@pytest.fixture(scope="module")
def zero_state0(grid, profile0, spectrum0, modes0):
    return build_initial_state(profile0, spectrum0, modes0,
                               np.zeros(grid.n), np.zeros(0), s0=6.0)


@pytest.fixture(scope="module")
def zero_run0(zero_state0, params0):
    return evolve(zero_state0, params0)


@pytest.fixture(scope="module")
def bump_run0(grid, profile0, spectrum0, modes0):
    bump = 1e-2 * np.exp(-((grid.r - 2.0) / 1.0) ** 2)
    state = build_initial_state(profile0, spectrum0, modes0, bump,
                                np.zeros(0), s0=6.0)
    params = FlowParams(n=0, profile=profile0, spectrum=spectrum0,
                        s0=6.0, ds=1e-3, s_end=9.0)
    return evolve(state, params), params


# -- parameter validation ------------------------------------------------------


def test_params_validation(profile0, spectrum0):
    with pytest.raises(DomainError):
        FlowParams(n=0, profile=profile0, spectrum=spectrum0, ds=0.0)
    with pytest.raises(DomainError):
        FlowParams(n=0, profile=profile0, spectrum=spectrum0,
                   s0=6.0, s_end=6.0)
    with pytest.raises(DomainError):
        # mu must stay at or below a quarter of the spectral gap (~0.068)
        FlowParams(n=0, profile=profile0, spectrum=spectrum0, mu=0.2)


def test_state_validation(grid):
    with pytest.raises(DomainError):
        ModulationState(s=6.0, lam=0.0, a=np.zeros(0), eps=np.zeros(grid.n))


# -- decomposition ---------------------------------------------------------------


def test_decompose_rescaled_family_member(grid, profile0, spectrum0,
                                          measure0):
    lam_star = 1.15
    w = 2.0 / (2.0 + (grid.r / lam_star) ** 2) / lam_star**2
    state = decompose(w, profile0, spectrum0)
    assert abs(state.lam - lam_star) <= 1e-9
    assert state.a.size == 0
    assert norm_l2(state.eps, measure0) <= 1e-8


def test_decompose_excited_mode_amplitude(profile1, spectrum1, modes1):
    from kslab.grids import build_measure
    w = profile1.samples + 1e-3 * modes1.psi[1]
    state = decompose(w, profile1, spectrum1)
    assert abs(state.lam - 1.0) <= 1e-6
    assert state.a.size == 1
    assert abs(state.a[0] - 1e-3) <= 1e-8
    assert norm_l2(state.eps, build_measure(profile1)) <= 1e-8


def test_decompose_orthogonality(grid, profile0, spectrum0):
    w = profile0.samples + 1e-3 * np.exp(-((grid.r - 3.0) / 1.5) ** 2)
    state = decompose(w, profile0, spectrum0)
    assert orthogonality_residuals(state, profile0, spectrum0).max() <= 1e-10


def test_decompose_rejects_far_state(profile0, spectrum0):
    with pytest.raises(OutsideTubeError):
        decompose(2.0 * profile0.samples, profile0, spectrum0)


# -- right-hand side -------------------------------------------------------------


def test_rhs_vanishes_on_profile(profile0, spectrum0):
    state = decompose(profile0.samples, profile0, spectrum0)
    dv, beta, da = rhs_renormalized(state, profile0, spectrum0)
    assert beta == 0.0
    assert da.size == 0
    assert np.abs(dv).max() <= 1e-10


def test_rhs_linear_rate_on_unstable_mode(layer_grid, profile1, spectrum1):
    a2 = 1e-4
    state = ModulationState(s=6.0, lam=1.0, a=np.array([a2]),
                            eps=np.zeros(layer_grid.n))
    dv, beta, da = rhs_renormalized(state, profile1, spectrum1)
    mu2 = -spectrum1.eigenvalues[0]
    assert abs(da[0] - mu2 * a2) <= 1e-2 * abs(mu2 * a2)
    assert abs(beta) <= 1e-6  # quadratic in the amplitude


def test_rhs_singular_far_outside_tube(layer_grid, profile1, spectrum1):
    state = ModulationState(s=6.0, lam=1.0, a=np.zeros(1),
                            eps=-profile1.samples)
    with pytest.raises(SingularModulationError):
        rhs_renormalized(state, profile1, spectrum1)


def test_step_rate_consistent_with_rhs(layer_grid, profile1, spectrum1,
                                       params1):
    # the stepper advances amplitudes with exponential updates on frozen
    # scalars; its finite-difference rate converges to the instantaneous
    # rhs rate at first order in ds
    state = ModulationState(s=6.0, lam=1.0, a=np.array([1e-5]),
                            eps=np.zeros(layer_grid.n))
    _, _, da = rhs_renormalized(state, profile1, spectrum1)
    errs = []
    for ds in (1e-3, 5e-4):
        nxt = step(state, params1, ds=ds)
        errs.append(abs((nxt.a[0] - state.a[0]) / ds - da[0]))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.3)


# -- stepping --------------------------------------------------------------------


def test_profile_is_fixed_point(zero_state0, params0):
    state = zero_state0
    c0 = state.lam * np.exp(state.s / 2.0)
    for _ in range(1000):
        state = step(state, params0)
    c1 = state.lam * np.exp(state.s / 2.0)
    assert abs(c1 - c0) <= 1e-10
    assert np.abs(state.eps).max() <= 1e-9
    assert state.a.size == 0


def test_step_first_order_in_ds(grid, profile0, spectrum0, modes0):
    # shrink ds toward a reference: |lam(ds) - lam(ref)| should scale
    # linearly, so the error ratios against the ds/8 reference are
    # (4 - 1/2)/(2 - 1/2) = 2.33 and (2 - 1/2)/(1 - 1/2) = 3
    bump = 1e-2 * np.exp(-((grid.r - 2.0) / 1.0) ** 2)
    lams = {}
    for ds in (4e-3, 2e-3, 1e-3, 5e-4):
        params = FlowParams(n=0, profile=profile0, spectrum=spectrum0,
                            s0=6.0, ds=ds, s_end=6.5)
        state = build_initial_state(profile0, spectrum0, modes0, bump,
                                    np.zeros(0), s0=6.0)
        traj, _ = evolve(state, params)
        lams[ds] = traj.lam[-1]
    e1 = abs(lams[4e-3] - lams[5e-4])
    e2 = abs(lams[2e-3] - lams[5e-4])
    e3 = abs(lams[1e-3] - lams[5e-4])
    assert e1 / e2 == pytest.approx(7.0 / 3.0, rel=0.15)
    assert e2 / e3 == pytest.approx(3.0, rel=0.15)


# -- monitored evolution -----------------------------------------------------------


def test_stable_run_monitors(bump_run0):
    (traj, diag), params = bump_run0
    assert traj.exit is None
    assert not diag.violated.any()
    spread = np.ptp(diag.lambda_e_s2) / diag.lambda_e_s2[0]
    assert spread <= 1e-2


def test_stable_run_energy_decay(bump_run0, spectrum0):
    (traj, diag), params = bump_run0
    half = traj.s.size // 2
    assert np.all(np.diff(traj.eps_l2[half:]) < 0)
    slope = np.polyfit(traj.s[half:], np.log(traj.eps_l2[half:]), 1)[0]
    assert slope <= -0.5 * spectrum0.gap


def test_stable_run_orthogonality_and_drift(bump_run0, profile0, spectrum0):
    (traj, diag), params = bump_run0
    # drift records the pre-projection orthogonality wander of each step;
    # it sits at roundoff for this amplitude (~1.4e-12 observed)
    assert traj.drift.max() <= 1e-11
    resid = orthogonality_residuals(traj.final_state, profile0, spectrum0)
    assert resid.max() <= 1e-9


def test_renormalized_time_matches_scale(zero_run0):
    # on the exact self-similar trajectory lambda = e^{-s/2}, so the
    # remaining original time T - t equals e^{-s}
    traj, diag = zero_run0
    T = traj.t[-1] + traj.lam[-1] ** 2
    rem = T - traj.t
    assert np.abs(rem - np.exp(-traj.s)).max() <= 1e-5 * np.exp(-traj.s[-1])


def test_unstable_exit_signs(layer_grid, profile1, spectrum1, modes1,
                             params1):
    for amp, want in ((+1e-3, 1), (-1e-3, -1)):
        state = build_initial_state(profile1, spectrum1, modes1,
                                    np.zeros(layer_grid.n), np.array([amp]),
                                    s0=6.0)
        traj, diag = evolve(state, params1)
        assert traj.exit is not None
        assert traj.exit["sign"] == want
        assert traj.exit["bound"] == 5
        assert traj.exit["name"] == "weighted max norm"
        # strictly outgoing: the driven amplitude grows into the exit
        assert np.all(np.diff(np.abs(traj.a[-10:, 0])) > 0)


# -- initial data ------------------------------------------------------------------


def test_initial_state_unperturbed(zero_state0):
    assert abs(zero_state0.lam - np.exp(-3.0)) <= 1e-14
    assert zero_state0.a.size == 0
    assert np.abs(zero_state0.eps).max() <= 1e-9


def test_initial_state_dials_amplitude(layer_grid, profile1, spectrum1,
                                       modes1):
    state = build_initial_state(profile1, spectrum1, modes1,
                                np.zeros(layer_grid.n), np.array([1e-3]),
                                s0=6.0)
    assert abs(state.a[0] - 1e-3) <= 1e-6
    lam0 = np.exp(-3.0)
    assert 0.5 * lam0 < state.lam < 2.0 * lam0


def test_initial_state_gate_rejects_unprojected_density(layer_grid, profile1,
                                                        spectrum1, modes1):
    bad = np.exp(-((layer_grid.r - 1.0) / 0.5) ** 2)
    with pytest.raises(DomainError):
        build_initial_state(profile1, spectrum1, modes1, bad,
                            np.zeros(1), s0=6.0)


# -- stable-manifold shoot ----------------------------------------------------------


def test_shoot_bisection_fixture(layer_grid, params1, modes1):
    res = shoot_stable_manifold(np.zeros(layer_grid.n), (-1e-3, 1e-3),
                                params1, modes1)
    assert abs(res.a2_star) <= 1e-3
    assert res.a2_star == pytest.approx(3.814697265625e-09, abs=1e-12)
    assert res.endpoint_exits == (-1, 1)
    assert res.trapped is False
    assert res.n_runs == 21
    assert len(res.history) == 21
    first = res.history[0]
    assert first["run"] == 0 and first["a2"] == -1e-3
    assert set(first) == {"run", "a2", "bound", "sign", "s_final"}
    # the midpoint run lingers longer than either endpoint
    endpoint_s = max(res.history[0]["s_final"], res.history[1]["s_final"])
    assert res.trajectory.s[-1] > endpoint_s


def test_shoot_rejects_same_side_bracket(layer_grid, params1, modes1):
    with pytest.raises(BracketError):
        shoot_stable_manifold(np.zeros(layer_grid.n), (1e-4, 1e-3),
                              params1, modes1)


# -- blow-up extraction --------------------------------------------------------------


def test_blowup_rates_on_exact_trajectory(zero_run0, params0):
    traj, diag = zero_run0
    report = blowup_extract(traj, params0)
    assert abs(report.rate_fit - 0.5) <= 1e-3
    assert abs(report.sup_growth + 1.0) <= 1e-3
    assert report.T > 0
    # (T - t) |u|_inf -> |U_0|_inf = 6 (Type I)
    assert abs(report.meta["type_i_product"] - 6.0) <= 0.05
    assert -2.2 <= report.u_star["slope"] <= -1.8


def test_blowup_rejects_growing_scale(params0):
    s = np.linspace(6.0, 7.0, 32)
    lam = np.exp(+0.5 * s)
    traj = Trajectory(s=s, lam=lam, t=np.zeros(32), a=np.zeros((32, 0)),
                      eps_l2=np.zeros(32), eps_inf=np.zeros(32),
                      weighted_sup=np.zeros(32), grad_sup=np.zeros(32),
                      sup_u=np.ones(32), drift=np.zeros(32), exit=None,
                      final_state=None, x_star=np.array([0.1]),
                      u_star=np.array([np.nan]), params=params0)
    with pytest.raises(DomainError):
        blowup_extract(traj, params0)


def test_lipschitz_probe_reports_stable_ratio(grid, profile0, spectrum0,
                                              modes0):
    params = FlowParams(n=0, profile=profile0, spectrum=spectrum0,
                        s0=6.0, ds=2e-3, s_end=9.0)
    ua = 1e-2 * np.exp(-((grid.r - 2.0) / 1.0) ** 2)
    ub = ua + 1e-3 * np.exp(-((grid.r - 1.5) / 0.8) ** 2)
    probe = lipschitz_probe(params, modes0, ua, ub)
    assert np.isfinite(probe["ratio"]) and probe["ratio"] > 0
    assert probe["delta_u0_inf"] == pytest.approx(1e-3, rel=1e-6)
    assert probe["ratio_half_ds"] == pytest.approx(probe["ratio"], rel=1e-3)


# -- mode role ordering ---------------------------------------------------------------


def test_localized_modes_role_order(profile1, spectrum1, modes1):
    from kslab.grids import build_measure
    measure = build_measure(profile1)
    scaling = spectrum1.pairs[1].eigenfunction  # eigenvalue -1
    deep = spectrum1.pairs[0].eigenfunction     # eigenvalue ~ -77
    assert min(norm_l2(modes1.psi[0] - scaling, measure),
               norm_l2(modes1.psi[0] + scaling, measure)) <= 1e-12
    assert min(norm_l2(modes1.psi[1] - deep, measure),
               norm_l2(modes1.psi[1] + deep, measure)) <= 1e-12
