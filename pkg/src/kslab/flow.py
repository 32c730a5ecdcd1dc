"""Renormalized evolution with modulation around a stationary profile.

The partial-mass field is evolved in self-similar variables: writing
w(t, x) = lambda(t)^-2 (Phi + v)(s, y) with y = x/lambda and ds/dt =
lambda^-2, the deviation v obeys

    v_s = -L v + N(v) + (lambda_s/lambda + 1/2) Lam(Phi + v),
    N(v) = 6 v^2 + Lam'(v^2),

where L is the linearized operator around Phi and Lam f = 2f + y f',
Lam' f = y f'. The scale lambda is a free parameter; it is fixed by
keeping the deviation orthogonal to the lowest eigenmode psi_1 (the
scaling mode Lam Phi up to normalization). The retained nonpositive
modes psi_1..psi_N split v = sum_{j>=2} a_j psi_j + eps with eps
orthogonal to every psi_j, which turns the PDE into one scalar equation
for beta = lambda_s/lambda + 1/2, ODEs for the amplitudes a_j, and a
driven heat-type equation for the remainder eps.

Time stepping is semi-implicit: L is inverted implicitly (tridiagonal
solve in the finite-volume row form, with a quadratic-decay
extrapolation closing the last cell instead of a Dirichlet pin), the
nonlinearity and the modulation forcing are explicit, lambda and the
a_j are advanced by exponential updates that are exact on the frozen
linear part. After every step eps is re-projected onto the orthogonal
complement of the retained modes; the removed drift is recorded.

A run is monitored against six bounds (scaling, mode amplitudes,
weighted L2 and max norms of eps, a weighted max norm of v, and the
max norm of y.grad v); the first violation stops the run and its index
and the sign of the dominant amplitude are recorded. For the excited
profile the amplitude a_2 is the single non-scaling unstable direction:
bisecting its initial value on the recorded exit sign brackets the
codimension-one stable set, and trajectories that stay trapped realize
the self-similar blow-up, whose time, rate, and limiting density
profile are extracted from the recorded scale history.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_banded
from scipy.optimize import brentq

from .errors import (BracketError, DomainError, OutsideTubeError,
                     SingularModulationError)
from .grids import (TailedInterpolant, inner_product, lambda_op,
                    lambda_prime_op, norm_l2, values_of)
from .transforms import (build_localized_modes, density_from_mass,
                         pairing_3d, partial_mass)

# Bound indices recorded on exit events, in the order the bounds are
# stated (1 scaling, 2 mode amplitudes, 3 weighted L2, 4 max norm,
# 5 weighted max norm of v, 6 max norm of y.grad v). 0 flags an
# integrator failure rather than a monitored bound.
BOUND_INTEGRATOR = 0
BOUND_SCALING = 1
BOUND_MODES = 2
BOUND_EPS_L2 = 3
BOUND_EPS_MAX = 4
BOUND_WEIGHTED = 5
BOUND_GRAD = 6

_BOUND_NAMES = {
    BOUND_INTEGRATOR: "integrator failure",
    BOUND_SCALING: "scaling",
    BOUND_MODES: "mode amplitudes",
    BOUND_EPS_L2: "weighted L2 norm",
    BOUND_EPS_MAX: "max norm",
    BOUND_WEIGHTED: "weighted max norm",
    BOUND_GRAD: "max norm of y.grad v",
}


@dataclass
class FlowParams:
    """Parameters of a renormalized run.

    Attributes
    ----------
    n : int
        Profile index (0 stable, 1 one extra unstable direction).
    s0, s_end : float
        Initial and final renormalized times.
    ds : float
        Step size.
    mu : float
        Decay-rate parameter of the monitors; must sit in (0, gap/4]
        where gap is the smallest positive eigenvalue.
    K, K_prime, K_double_prime, delta : float
        Monitor thresholds (weighted L2, max norm, y.grad max norm,
        and the weighted max norm of v).
    profile : Profile
    spectrum : SpectrumReport
        Must carry the assembling operator in meta["operator"].
    x_star : ndarray or None
        Fixed original-space radii where the limiting density is
        sampled; defaults to a log-spaced set covering [0.01, 1].
    y_cap : float or None
        Capture radius in self-similar variables; a sample x freezes
        when x/lambda crosses it. Defaults to r_max/2.
    tube_radius : float
        Admissible max-norm deviation for the initial decomposition.
    """

    n: int
    profile: object
    spectrum: object
    s0: float = 6.0
    ds: float = 1e-3
    mu: float = 0.05
    s_end: float = 20.0
    K: float = 100.0
    K_prime: float = 100.0
    K_double_prime: float = 100.0
    delta: float = 0.1
    x_star: object = None
    y_cap: object = None
    tube_radius: float = 0.5

    def __post_init__(self):
        if self.ds <= 0:
            raise DomainError("ds must be positive")
        if self.s_end <= self.s0:
            raise DomainError("s_end must exceed s0")
        if self.mu <= 0:
            raise DomainError("mu must be positive")
        gap = getattr(self.spectrum, "gap", np.inf)
        if np.isfinite(gap) and self.mu > 0.25 * gap + 1e-12:
            raise DomainError("mu exceeds a quarter of the spectral gap")


@dataclass
class ModulationState:
    """State of the modulated flow at one renormalized time.

    The deviation from the profile is v = sum_j a_j psi_j + eps with
    eps orthogonal to all retained modes; lambda is the current scale
    and t the accumulated original time, dt = lambda^2 ds.
    """

    s: float
    lam: float
    a: np.ndarray
    eps: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.eps = np.asarray(values_of(self.eps), dtype=float)
        if self.lam <= 0 or not np.isfinite(self.lam):
            raise DomainError("scale must be positive and finite")


@dataclass
class FlowDiagnostics:
    """Monitor series of a run, one sample per accepted step.

    series holds the six monitored quantities in bound order:
    lambda e^{mu s}, sum a_j^2 e^{2 mu s}, |eps|_rho e^{mu s},
    |eps|_inf e^{mu s}, sup |y^2 v / (1 + e^-s y^2)|, and
    |y.grad v|_inf e^{mu s}; thresholds are (1, 1, K, K', delta, K'').
    violated[k] marks samples at or past bound k+1's threshold
    (monotone: once a violation is recorded it stays recorded);
    first_violation[k] is the sample index, -1 when the bound held.
    """

    series: np.ndarray
    thresholds: np.ndarray
    violated: np.ndarray
    first_violation: np.ndarray
    lambda_e_s2: np.ndarray


@dataclass
class Trajectory:
    """Scalar history of a run plus the final state and exit record."""

    s: np.ndarray
    lam: np.ndarray
    t: np.ndarray
    a: np.ndarray
    eps_l2: np.ndarray
    eps_inf: np.ndarray
    weighted_sup: np.ndarray
    grad_sup: np.ndarray
    sup_u: np.ndarray
    drift: np.ndarray
    exit: object
    final_state: ModulationState
    x_star: np.ndarray
    u_star: np.ndarray
    params: FlowParams


@dataclass
class BlowupReport:
    """Blow-up time, rates, and limiting profile of a trapped run."""

    T: float
    rate_fit: float
    sup_growth: float
    u_star: dict
    lipschitz_probe: object = None
    meta: dict = field(default_factory=dict)


# -- shared per-spectrum context ---------------------------------------------


class _FlowContext:
    """Arrays reused by every operation tied to one spectrum report."""

    def __init__(self, profile, spectrum):
        op = spectrum.meta.get("operator")
        if op is None:
            raise DomainError("spectrum report carries no operator; "
                              "rebuild it with eigen_solve")
        self.op = op
        self.grid = op.grid
        self.measure = op.measure
        self.phi = np.asarray(profile.values, dtype=float)
        if self.phi.shape != self.grid.r.shape:
            raise DomainError("profile and spectrum grids differ")
        self.lam_phi = lambda_op(self.phi, self.grid)
        self.n_modes = spectrum.n_nonpositive
        if self.n_modes < 1:
            raise DomainError("no nonpositive modes retained")
        psis = np.array([p.eigenfunction
                         for p in spectrum.pairs[:self.n_modes]])
        eigs = np.asarray(spectrum.eigenvalues[:self.n_modes])
        # The retained modes are indexed by role, not by eigenvalue: the
        # scaling mode (the Lam Phi direction, eigenvalue -1) comes first,
        # the remaining nonpositive modes follow in ascending order. For
        # the excited profile the deepest eigenvalue belongs to the
        # non-scaling unstable direction, so ascending order alone would
        # put the wrong mode in the scaling slot.
        overlaps = np.abs(psis @ (self.measure.weighted_quad * self.lam_phi))
        scal = int(np.argmax(overlaps))
        order = [scal] + [j for j in range(self.n_modes) if j != scal]
        self.psis = psis[order]
        self.eigs = eigs[order]
        self.mode_order = order
        wq = self.measure.weighted_quad
        from .grids import SPHERE_AREA_5D
        self.wq = SPHERE_AREA_5D * wq
        gram = self.psis @ (self.wq * self.psis).T
        self.gram = gram
        self.gram_offdiag = float(np.abs(gram - np.diag(np.diag(gram))).max())
        self.gram_cho = cho_factor(gram)
        self.interp_phi = TailedInterpolant(self.grid, self.phi)
        # row form of L on the interior nodes, with the last cell closed
        # by the quadratic-decay extrapolation u(r_max) = kappa u(r_max-)
        r = self.grid.r
        self.kappa = (r[-2] / r[-1]) ** 2
        g = op.conduct
        m = op.mass
        nm = m.size
        lower = np.zeros(nm)
        upper = np.zeros(nm)
        diag = np.empty(nm)
        diag[0] = g[0] / m[0]
        diag[1:] = (g[:-1] + g[1:]) / m[1:]
        diag[-1] -= g[-1] * self.kappa / m[-1]
        upper[:-1] = -g[:-1] / m[:-1]
        lower[1:] = -g[:-1] / m[1:]
        self.row_lower = lower
        self.row_diag = diag + op.potential[:-1]
        self.row_upper = upper
        self._banded = {}

    def dots(self, f):
        """Inner products of a full-grid field with every retained mode."""
        return self.psis @ (self.wq * f)

    def project_out(self, f):
        """Remove the retained-mode components (Gram-corrected).

        Returns the projected field and the largest removed coefficient.
        """
        coeff = cho_solve(self.gram_cho, self.dots(f))
        out = f - coeff @ self.psis
        return out, float(np.abs(coeff).max())

    def apply_rows(self, f):
        """L f on the interior nodes in the row form used by the stepper."""
        u = f[:-1]
        out = self.row_diag * u
        out[:-1] += self.row_upper[:-1] * u[1:]
        out[1:] += self.row_lower[1:] * u[:-1]
        return out

    def close_boundary(self, f):
        """Fill the r_max entry by the quadratic-decay extrapolation."""
        f[-1] = self.kappa * f[-2]
        return f

    def banded(self, ds):
        """Banded form of I + ds L for solve_banded, cached per ds."""
        key = float(ds)
        if key not in self._banded:
            nm = self.row_diag.size
            ab = np.zeros((3, nm))
            ab[0, 1:] = ds * self.row_upper[:-1]
            ab[1] = 1.0 + ds * self.row_diag
            ab[2, :-1] = ds * self.row_lower[1:]
            self._banded[key] = ab
        return self._banded[key]


def _context(profile, spectrum):
    ctx = spectrum.meta.get("_flow_context")
    if ctx is None or ctx.phi.shape != np.shape(getattr(profile, "values",
                                                        profile)):
        ctx = _FlowContext(profile, spectrum)
        spectrum.meta["_flow_context"] = ctx
    return ctx


def localized_modes_for(profile, spectrum, R=20.0):
    """Localized mode set over the retained modes in role order.

    Role order puts the scaling mode first, which is what every flow
    operation taking a LocalizedModeSet expects; building the set from
    raw ascending-eigenvalue mode lists would misplace it for n >= 1.
    """
    ctx = _context(profile, spectrum)
    return build_localized_modes(list(ctx.psis), ctx.measure, R=R)


# -- decomposition ------------------------------------------------------------


def decompose(w, profile, spectrum, s=0.0, t=0.0, lambda_guess=1.0,
              tube_radius=0.5):
    """Split a partial-mass field into scale, amplitudes, and remainder.

    The scale lambda is the root of (lambda^2 w(lambda y) - Phi,
    psi_1)_rho = 0, which makes the rescaled deviation orthogonal to
    the scaling mode; the remaining amplitudes are read off by
    projection, a_j = (v, psi_j)_rho for j >= 2, and eps = v - sum a_j
    psi_j is re-projected so every orthogonality holds to roundoff.

    Parameters
    ----------
    w : RadialField or ndarray
        Partial-mass field on the spectrum's grid.
    profile : Profile
    spectrum : SpectrumReport
    s, t : float
        Clock values stamped on the returned state.
    lambda_guess : float
        Center of the initial root bracket.
    tube_radius : float
        Largest admissible max norm of the rescaled deviation.

    Raises
    ------
    OutsideTubeError
        If no root is bracketed or the deviation exceeds tube_radius.
    """
    ctx = _context(profile, spectrum)
    grid = ctx.grid
    interp_w = TailedInterpolant(grid, values_of(w))
    psi1 = ctx.psis[0]
    wq = ctx.wq

    def deviation(lam):
        return lam**2 * interp_w(lam * grid.r) - ctx.phi

    def g(lam):
        return float(np.dot(wq * deviation(lam), psi1))

    lo = hi = float(lambda_guess)
    glo = ghi = g(lo)
    for _ in range(24):
        if glo == 0.0 or ghi == 0.0 or glo * ghi < 0.0:
            break
        lo /= 1.2
        hi *= 1.2
        glo = g(lo)
        ghi = g(hi)
        if lo < 0.05 * lambda_guess or hi > 20.0 * lambda_guess:
            break
    if glo * ghi > 0.0:
        raise OutsideTubeError("no scale renders the deviation orthogonal "
                               "to the lowest mode near lambda_guess")
    lam = brentq(g, lo, hi, xtol=1e-15, rtol=8.9e-16)
    v = deviation(lam)
    sup = float(np.abs(v).max())
    if sup > tube_radius:
        raise OutsideTubeError("rescaled deviation has max norm %.3g, "
                               "outside the tube radius %.3g"
                               % (sup, tube_radius))
    dots = ctx.dots(v)
    a = dots[1:].copy()
    eps = v - a @ ctx.psis[1:]
    eps, _ = ctx.project_out(eps)
    return ModulationState(s=float(s), lam=float(lam), a=a, eps=eps,
                           t=float(t))


def orthogonality_residuals(state, profile, spectrum):
    """|(eps, psi_j)_rho| for every retained mode, largest first useful."""
    ctx = _context(profile, spectrum)
    return np.abs(ctx.dots(state.eps))


# -- right-hand side and stepping ---------------------------------------------


def _assemble_v(ctx, state):
    if state.a.size:
        return state.eps + state.a @ ctx.psis[1:]
    return state.eps.copy()


def _modulation_solve(ctx, state, v, nl, l_eps):
    """Scalars (beta, gamma_j) keeping eps orthogonal to the modes.

    Solves the projected system: for every retained mode psi_i,
    (eps_s, psi_i) = 0 forces
    sum_j gamma_j (psi_j, psi_i) - beta (Lam(Phi+v), psi_i)
        = (N(v) - L eps, psi_i), j >= 2.
    The amplitude laws are (a_j)_s = -lam_j a_j + gamma_j.
    """
    lam_total = ctx.lam_phi + lambda_op(v, ctx.grid)
    proj_lam = ctx.dots(lam_total)
    rhs = ctx.dots(nl)
    rhs -= ctx.dots(l_eps)
    n_modes = ctx.n_modes
    mat = np.zeros((n_modes, n_modes))
    mat[:, 0] = -proj_lam
    if n_modes > 1:
        mat[:, 1:] = ctx.gram[:, 1:]
    scale = float(np.abs(proj_lam[0]))
    ref = norm_l2(lam_total, ctx.measure)
    if scale < 1e-10 * max(ref, 1e-30):
        raise SingularModulationError("the scaling mode has lost its "
                                      "projection; the state is far "
                                      "outside the tube")
    try:
        sol = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError:
        raise SingularModulationError("projected modulation system is "
                                      "singular")
    beta = float(sol[0])
    gamma = sol[1:]
    return beta, gamma, lam_total


def _nonlinearity(ctx, v):
    return 6.0 * v * v + lambda_prime_op(v * v, ctx.grid)


def rhs_renormalized(state, profile, spectrum):
    """Instantaneous rates of the modulated system.

    Returns (dv/ds, beta, da/ds): the full deviation rate as a grid
    field, beta = lambda_s/lambda + 1/2, and the amplitude rates.
    For the unperturbed profile state all three vanish (beta exactly,
    by the vanishing of every projected forcing).
    """
    ctx = _context(profile, spectrum)
    v = _assemble_v(ctx, state)
    nl = _nonlinearity(ctx, v)
    l_eps = np.zeros_like(v)
    l_eps[:-1] = ctx.apply_rows(state.eps)
    beta, gamma, lam_total = _modulation_solve(ctx, state, v, nl, l_eps)
    eps_s = -l_eps + nl + beta * lam_total
    if state.a.size:
        eps_s -= gamma @ ctx.psis[1:]
    eps_s, _ = ctx.project_out(eps_s)
    a_dot = -ctx.eigs[1:] * state.a + gamma
    dv_ds = eps_s + (a_dot @ ctx.psis[1:] if state.a.size else 0.0)
    return dv_ds, beta, a_dot


def step(state, params, ds=None):
    """Advance one semi-implicit step of size ds (params.ds by default).

    The linear operator acts implicitly on eps (tridiagonal solve),
    the nonlinearity and modulation forcing act explicitly, and the
    scale and amplitudes take exponential updates that are exact on
    their frozen linear parts. eps is re-projected afterwards; the
    removed drift is stored on the returned state as proj_drift.
    """
    ctx = _context(params.profile, params.spectrum)
    if ds is None:
        ds = params.ds
    v = _assemble_v(ctx, state)
    nl = _nonlinearity(ctx, v)
    l_eps = np.zeros_like(v)
    l_eps[:-1] = ctx.apply_rows(state.eps)
    beta, gamma, lam_total = _modulation_solve(ctx, state, v, nl, l_eps)
    forcing = nl + beta * lam_total
    if state.a.size:
        forcing = forcing - gamma @ ctx.psis[1:]
    rhs = state.eps[:-1] + ds * forcing[:-1]
    eps_new = np.empty_like(state.eps)
    eps_new[:-1] = solve_banded((1, 1), ctx.banded(ds), rhs)
    ctx.close_boundary(eps_new)
    eps_new, drift = ctx.project_out(eps_new)
    lam_new = state.lam * np.exp((beta - 0.5) * ds)
    a_new = np.exp(-ctx.eigs[1:] * ds) * (state.a + ds * gamma)
    t_new = state.t + 0.5 * ds * (state.lam**2 + lam_new**2)
    out = ModulationState(s=state.s + ds, lam=float(lam_new), a=a_new,
                          eps=eps_new, t=float(t_new))
    out.proj_drift = drift
    out.beta = beta
    return out


# -- monitored evolution -------------------------------------------------------

_SPIKE_FACTOR = 10.0
_MAX_HALVINGS = 6


def _robust_step(state, params):
    """One step with halving on monitor spikes.

    A spike is a non-finite result or a tenfold jump of the remainder's
    max norm within one step; the step is then retried from the same
    state with half the size, down to ds/2^6. A still-broken smallest
    step is accepted so the caller records the failure as an exit.
    """
    ref = float(np.abs(state.eps).max()) + 1e-8
    ds = params.ds
    for attempt in range(_MAX_HALVINGS + 1):
        new = step(state, params, ds)
        ok = (np.isfinite(new.lam) and np.isfinite(new.a).all()
              and np.isfinite(new.eps).all()
              and float(np.abs(new.eps).max()) <= _SPIKE_FACTOR * ref)
        if ok or attempt == _MAX_HALVINGS:
            return new
        ds *= 0.5
    return new


def _monitors(ctx, state, params):
    """The six monitored quantities for one state, in bound order."""
    v = _assemble_v(ctx, state)
    grid = ctx.grid
    es = np.exp(params.mu * state.s)
    m1 = state.lam * es
    m2 = float(np.dot(state.a, state.a)) * es * es
    m3 = norm_l2(state.eps, ctx.measure) * es
    m4 = float(np.abs(state.eps).max()) * es
    weight = grid.r**2 / (1.0 + np.exp(-state.s) * grid.r**2)
    m5 = float(np.abs(v * weight).max())
    m6 = float(np.abs(grid.r * (grid.d1 @ v)).max()) * es
    return np.array([m1, m2, m3, m4, m5, m6]), v


def evolve(initial, params):
    """Integrate to s_end or the first monitor violation.

    Returns (trajectory, diagnostics). The trajectory records scalar
    series (scale, original time, amplitudes, norms, the original-space
    sup of the density) plus captured samples of the limiting density
    u(x) at fixed radii: each sample freezes once x/lambda outgrows the
    capture radius, so a trapped run assembles the blow-up limit from
    the outside in. An exit event stores the violated bound's index and
    the sign of the dominant amplitude at exit.
    """
    ctx = _context(params.profile, params.spectrum)
    thresholds = np.array([1.0, 1.0, params.K, params.K_prime, params.delta,
                           params.K_double_prime])
    n_steps = int(np.ceil((params.s_end - params.s0) / params.ds - 1e-9))
    n_samples = n_steps + 1
    n_amp = ctx.n_modes - 1
    series = np.empty((n_samples, 6))
    s_arr = np.empty(n_samples)
    lam_arr = np.empty(n_samples)
    t_arr = np.empty(n_samples)
    a_arr = np.empty((n_samples, n_amp))
    eps_l2 = np.empty(n_samples)
    eps_inf = np.empty(n_samples)
    wsup = np.empty(n_samples)
    gsup = np.empty(n_samples)
    sup_u = np.empty(n_samples)
    drift = np.zeros(n_samples)
    x_star = (np.geomspace(0.01, 1.0, 41) if params.x_star is None
              else np.asarray(params.x_star, dtype=float))
    y_cap = (0.5 * ctx.grid.r_max if params.y_cap is None
             else float(params.y_cap))
    u_star = np.full(x_star.size, np.nan)
    state = initial
    exit_event = None
    k = 0
    while True:
        mon, v = _monitors(ctx, state, params)
        finite = np.isfinite(mon).all() and np.isfinite(state.lam)
        u_tot = density_from_mass(ctx.phi + v, ctx.grid)
        series[k] = mon
        s_arr[k] = state.s
        lam_arr[k] = state.lam
        t_arr[k] = state.t
        a_arr[k] = state.a
        eps_l2[k] = mon[2] * np.exp(-params.mu * state.s)
        eps_inf[k] = mon[3] * np.exp(-params.mu * state.s)
        wsup[k] = mon[4]
        gsup[k] = mon[5] * np.exp(-params.mu * state.s)
        sup_u[k] = float(np.abs(u_tot).max()) / state.lam**2
        drift[k] = getattr(state, "proj_drift", 0.0)
        if not finite:
            exit_event = _exit_record(BOUND_INTEGRATOR, state, k)
            k += 1
            break
        pending = np.isnan(u_star) & (x_star / state.lam >= y_cap)
        if pending.any():
            # beyond the grid the density follows its inverse-square tail
            y_pend = x_star[pending] / state.lam
            vals = np.interp(np.minimum(y_pend, ctx.grid.r_max),
                             ctx.grid.r, u_tot)
            far = y_pend > ctx.grid.r_max
            vals[far] *= (ctx.grid.r_max / y_pend[far]) ** 2
            u_star[pending] = vals / state.lam**2
        hit = np.nonzero(mon >= thresholds)[0]
        if hit.size:
            exit_event = _exit_record(int(hit[0]) + 1, state, k)
            k += 1
            break
        if k == n_steps:
            k += 1
            break
        state = _robust_step(state, params)
        k += 1
    series = series[:k]
    violated = np.maximum.accumulate(series >= thresholds, axis=0)
    first = np.full(6, -1)
    for b in range(6):
        idx = np.nonzero(violated[:, b])[0]
        if idx.size:
            first[b] = int(idx[0])
    diags = FlowDiagnostics(series=series, thresholds=thresholds,
                            violated=violated, first_violation=first,
                            lambda_e_s2=lam_arr[:k] * np.exp(s_arr[:k] / 2))
    traj = Trajectory(s=s_arr[:k], lam=lam_arr[:k], t=t_arr[:k],
                      a=a_arr[:k], eps_l2=eps_l2[:k], eps_inf=eps_inf[:k],
                      weighted_sup=wsup[:k], grad_sup=gsup[:k],
                      sup_u=sup_u[:k], drift=drift[:k], exit=exit_event,
                      final_state=state, x_star=x_star, u_star=u_star,
                      params=params)
    return traj, diags


def _exit_record(bound, state, sample):
    if state.a.size:
        j = int(np.argmax(np.abs(state.a)))
        sign = int(np.sign(state.a[j])) if state.a[j] != 0 else 0
    else:
        sign = 0
    return {"bound": bound, "name": _BOUND_NAMES[bound], "sign": sign,
            "s": float(state.s), "sample": int(sample)}


# -- initial data --------------------------------------------------------------


def orthogonalize_density(bar_u0, modes, skip_scaling=True):
    """Project a density onto the admissible set of the dual weights.

    Subtracts multiples of the localized modes so the pairings against
    theta_j vanish for j >= 2 (or all j), which is the membership gate
    for initial perturbations in the original variables.
    """
    grid = modes.measure.grid
    u = values_of(bar_u0).astype(float).copy()
    start = 1 if skip_scaling else 0
    for row in range(start, len(modes.indices)):
        theta = modes.theta[row]
        denom = pairing_3d(modes.phi_bar[row], theta, grid)
        u -= (pairing_3d(u, theta, grid) / denom) * modes.phi_bar[row]
    return u


def build_initial_state(profile, spectrum, modes, bar_u0, a0, s0=6.0,
                        gate_tol=1e-8, smallness=None, mu=0.05,
                        tube_radius=0.5):
    """Assemble admissible initial data and decompose it.

    In the original variables the data is u0(x) = lam0^-2 (U_n + bar_u0
    + sum_j bar_a_j phi_bar_j)(x/lam0) with lam0 = e^{-s0/2}. Since the
    partial-mass map commutes with that rescaling, the decomposition is
    performed at unit scale on the grid and the root scale is then
    multiplied by lam0 exactly; this keeps the tiny initial scale from
    costing any resolution.

    Parameters
    ----------
    profile, spectrum : as elsewhere.
    modes : LocalizedModeSet
        Supplies the dual weights theta_j (membership gate) and the
        compactly supported mode representatives phi_bar_j.
    bar_u0 : RadialField or ndarray
        Density perturbation; must pair to zero against theta_j, j >= 2.
    a0 : sequence
        Amplitudes bar_a_j, one per non-scaling retained mode.
    s0 : float
        Initial renormalized time.
    gate_tol : float
        Tolerance of the membership gate, scaled by (1 + |bar_u0|_inf).
    smallness : float or None
        When given, bound required of the four perturbation norms
        (scaled by e^{-mu s0}).

    Raises
    ------
    DomainError
        If the gate or smallness precondition fails, or a0 has the
        wrong length.
    OutsideTubeError
        If the decomposition fails, or the recovered scale leaves
        (1/2, 2) x e^{-s0/2}.
    """
    ctx = _context(profile, spectrum)
    grid = ctx.grid
    u_bar = values_of(bar_u0).astype(float)
    a0 = np.atleast_1d(np.asarray(a0, dtype=float))
    if a0.size != ctx.n_modes - 1:
        raise DomainError("a0 must supply one amplitude per non-scaling "
                          "mode (%d expected)" % (ctx.n_modes - 1))
    scale_ref = 1.0 + float(np.abs(u_bar).max()) if u_bar.size else 1.0
    for row in range(1, min(len(modes.indices), ctx.n_modes)):
        pair = pairing_3d(u_bar, modes.theta[row], grid)
        if abs(pair) > gate_tol * scale_ref:
            raise DomainError("density pairs with dual weight %d "
                              "(%.3g); project it first"
                              % (modes.indices[row], pair))
    w_bar = partial_mass(u_bar, grid)
    if smallness is not None:
        sizes = (norm_l2(w_bar, ctx.measure)
                 + float(np.abs(w_bar).max())
                 + float(np.abs(w_bar * grid.r**2
                                / (1.0 + np.exp(-s0) * grid.r**2)).max())
                 + float(np.abs(grid.r * (grid.d1 @ w_bar)).max()))
        if sizes > smallness * np.exp(-mu * s0):
            raise DomainError("perturbation norms %.3g exceed the "
                              "smallness budget" % sizes)
    if float(np.dot(a0, a0)) > np.exp(-2.0 * mu * s0):
        raise DomainError("mode amplitudes exceed the smallness budget")
    u_n = density_from_mass(ctx.phi, grid)
    u_total = u_n + u_bar
    if a0.size:
        u_total = u_total + a0 @ modes.phi_bar[1:ctx.n_modes]
    w_total = partial_mass(u_total, grid)
    state = decompose(w_total, profile, spectrum, s=s0, t=0.0,
                      lambda_guess=1.0, tube_radius=tube_radius)
    lam_bar = np.exp(-0.5 * s0)
    if not (0.5 < state.lam < 2.0):
        raise OutsideTubeError("recovered scale %.3g lies outside "
                               "(1/2, 2) of the reference e^{-s0/2}"
                               % state.lam)
    state.lam = float(state.lam * lam_bar)
    return state


# -- shooting on the unstable amplitude ----------------------------------------


@dataclass
class ManifoldResult:
    """Outcome of the bisection on the unstable amplitude.

    history holds one record per run, in execution order: the candidate
    amplitude, the violated bound (0 when the run reached s_end), the
    exit sign, and the final renormalized time.
    """

    a2_star: float
    bracket: tuple
    trajectory: Trajectory
    diagnostics: FlowDiagnostics
    trapped: bool
    exit: object
    n_runs: int
    endpoint_exits: tuple
    history: list = field(default_factory=list)


def _exit_sign(traj):
    if traj.exit is None:
        return 0
    return traj.exit["sign"]


def shoot_stable_manifold(v0_base, bracket, params, modes, bisect_tol=1e-8,
                          max_runs=80):
    """Bisect the unstable amplitude onto the stable set.

    Runs the monitored evolution from initial amplitudes a_2 at the two
    bracket endpoints; their exits must carry opposite signs. The
    bracket is then bisected on the recorded exit sign until its width
    drops below bisect_tol; the returned result holds the midpoint run
    (trapped if it reached s_end without an exit event).

    Parameters
    ----------
    v0_base : RadialField or ndarray
        Density perturbation shared by every run (the gate-projected
        part of the initial data).
    bracket : (float, float)
        Initial amplitudes a_2 at the endpoints.
    params : FlowParams
    modes : LocalizedModeSet
    bisect_tol : float
        Final bracket width.

    Raises
    ------
    BracketError
        If the endpoint exits carry the same sign.
    """
    if _context(params.profile, params.spectrum).n_modes < 2:
        raise DomainError("shooting needs at least one non-scaling mode")
    history = []

    def run(a2):
        state = build_initial_state(params.profile, params.spectrum, modes,
                                    v0_base, [a2], s0=params.s0,
                                    mu=params.mu,
                                    tube_radius=params.tube_radius)
        traj, diag = evolve(state, params)
        bound = 0 if traj.exit is None else traj.exit["bound"]
        history.append({"run": len(history), "a2": float(a2),
                        "bound": int(bound), "sign": _exit_sign(traj),
                        "s_final": float(traj.s[-1])})
        return traj, diag

    lo, hi = float(bracket[0]), float(bracket[1])
    if lo > hi:
        lo, hi = hi, lo
    traj_lo, diag_lo = run(lo)
    traj_hi, diag_hi = run(hi)
    sign_lo = _exit_sign(traj_lo)
    sign_hi = _exit_sign(traj_hi)
    n_runs = 2
    if sign_lo == 0:
        return ManifoldResult(a2_star=lo, bracket=(lo, hi),
                              trajectory=traj_lo, diagnostics=diag_lo,
                              trapped=True, exit=None, n_runs=n_runs,
                              endpoint_exits=(sign_lo, sign_hi),
                              history=history)
    if sign_hi == 0:
        return ManifoldResult(a2_star=hi, bracket=(lo, hi),
                              trajectory=traj_hi, diagnostics=diag_hi,
                              trapped=True, exit=None, n_runs=n_runs,
                              endpoint_exits=(sign_lo, sign_hi),
                              history=history)
    if sign_lo == sign_hi:
        raise BracketError("both endpoints exit with sign %+d; widen the "
                           "bracket" % sign_lo)
    traj_mid, diag_mid = traj_lo, diag_lo
    while hi - lo > bisect_tol and n_runs < max_runs:
        mid = 0.5 * (lo + hi)
        traj_mid, diag_mid = run(mid)
        n_runs += 1
        sign_mid = _exit_sign(traj_mid)
        if sign_mid == 0:
            return ManifoldResult(a2_star=mid, bracket=(lo, hi),
                                  trajectory=traj_mid, diagnostics=diag_mid,
                                  trapped=True, exit=None, n_runs=n_runs,
                                  endpoint_exits=(sign_lo, sign_hi),
                                  history=history)
        if sign_mid == sign_lo:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    traj_mid, diag_mid = run(mid)
    n_runs += 1
    trapped = traj_mid.exit is None
    return ManifoldResult(a2_star=mid, bracket=(lo, hi),
                          trajectory=traj_mid, diagnostics=diag_mid,
                          trapped=trapped, exit=traj_mid.exit,
                          n_runs=n_runs, endpoint_exits=(sign_lo, sign_hi),
                          history=history)


# -- blow-up extraction ---------------------------------------------------------


def blowup_extract(trajectory, params, transient=0.25, tail_fraction=0.2):
    """Blow-up time and rates from a trapped trajectory.

    The remaining original time past the last sample is the geometric
    tail of lambda^2: fitting sigma = d(log lambda)/ds over the last
    stretch gives T - t_end = lambda_end^2 / (-2 sigma), exact for a
    pure exponential. Rates are then least-squares slopes of log lambda
    and log sup|u| against log(T - t); the limiting density samples are
    checked for the inverse-square growth by a log-log slope over
    [0.05, 0.5].

    Raises
    ------
    DomainError
        If the scale is not decaying over the fitted stretch.
    """
    s = trajectory.s
    lam = trajectory.lam
    t = trajectory.t
    if s.size < 16:
        raise DomainError("trajectory too short to fit rates")
    n_tail = max(8, int(tail_fraction * s.size))
    st, lt = s[-n_tail:], np.log(lam[-n_tail:])
    sigma = np.polyfit(st, lt, 1)[0]
    if sigma >= 0:
        raise DomainError("scale is not decaying; no blow-up to extract")
    T = float(t[-1] + lam[-1] ** 2 / (-2.0 * sigma))
    lo = int(transient * s.size)
    hi = s.size - 2
    window = slice(lo, hi)
    log_rem = np.log(T - t[window])
    rate_fit = float(np.polyfit(log_rem, np.log(lam[window]), 1)[0])
    sup_growth = float(np.polyfit(log_rem,
                                  np.log(trajectory.sup_u[window]), 1)[0])
    x = trajectory.x_star
    u = trajectory.u_star
    good = np.isfinite(u) & (x >= 0.05) & (x <= 0.5) & (u > 0)
    slope = (float(np.polyfit(np.log(x[good]), np.log(u[good]), 1)[0])
             if good.sum() >= 4 else np.nan)
    u_star = {"x": x, "values": u, "slope": slope}
    product = float((T - t[-1]) * trajectory.sup_u[-1])
    meta = {"sigma": float(sigma), "type_i_product": product,
            "t_end": float(t[-1]), "lambda_end": float(lam[-1]),
            "fit_window": (lo, hi)}
    return BlowupReport(T=T, rate_fit=rate_fit, sup_growth=sup_growth,
                        u_star=u_star, meta=meta)


def lipschitz_probe(params, modes, bar_u0_a, bar_u0_b, a0=None):
    """Ratio |Delta T| / |Delta u0|_inf for a pair of perturbations.

    Runs the monitored evolution from both densities (same amplitudes),
    extracts the two blow-up times, and reports the ratio together with
    a ds-halved rerun of the same pair. Reported, not asserted: the
    constant is an empirical probe of the Lipschitz dependence of the
    blow-up time on the data.
    """
    ua = values_of(bar_u0_a).astype(float)
    ub = values_of(bar_u0_b).astype(float)
    denom = float(np.abs(ua - ub).max())
    if denom == 0:
        raise DomainError("the two densities coincide")
    if a0 is None:
        a0 = np.zeros(_context(params.profile,
                               params.spectrum).n_modes - 1)

    def extract(u, prm):
        st = build_initial_state(prm.profile, prm.spectrum, modes, u, a0,
                                 s0=prm.s0, mu=prm.mu,
                                 tube_radius=prm.tube_radius)
        traj, _ = evolve(st, prm)
        return blowup_extract(traj, prm)

    ratio = abs(extract(ua, params).T - extract(ub, params).T) / denom
    half = FlowParams(n=params.n, profile=params.profile,
                      spectrum=params.spectrum, s0=params.s0,
                      ds=0.5 * params.ds, mu=params.mu,
                      s_end=params.s_end, K=params.K,
                      K_prime=params.K_prime,
                      K_double_prime=params.K_double_prime,
                      delta=params.delta, x_star=params.x_star,
                      y_cap=params.y_cap, tube_radius=params.tube_radius)
    ratio_half = (abs(extract(ua, half).T - extract(ub, half).T) / denom)
    return {"ratio": float(ratio), "ratio_half_ds": float(ratio_half),
            "delta_u0_inf": denom}
