"""Spectrum of the linearized operator in the weighted space.

Linearizing the rescaled partial-mass equation around a profile Phi gives

    L u = -Delta u + (1/2) Lambda u - 2 Lambda'(Phi u) - 12 Phi u,

self-adjoint in L^2_rho for the profile weight rho. Expanding the scaling
and drift terms turns it into Sturm-Liouville form,

    L u = -(rho r^4 u')' / (rho r^4) + V u,   V = 1 - 2 r Phi' - 12 Phi,

which is what gets discretized here: a finite-volume stiffness matrix with
conductances rho r^4 at cell faces plus a lumped mass matrix, symmetrized
and handed to the LAPACK tridiagonal eigensolver (Sturm-sequence bisection
with inverse iteration). The scaling direction is an exact eigenpair,
L (Lambda Phi) = -(Lambda Phi), used as an oracle throughout.

The far field of (L - lambda) u = 0 (profile terms dropped) reduces under
u = y^{-3/2} nu(y/4), y = r^2, to Kummer's equation with b = -1/2 and
a = -1/2 - lambda; the two branches behave like

    u1 ~ r^{2(lambda-1)} (1 - 2(lambda-1)(2 lambda+1)/r^2 + ...)
    u2 ~ r^{-2(3/2+lambda)} e^{r^2/4} (1 + 4 lambda(3/2+lambda)/r^2 + ...)

with Wronskian u1 u2' - u1' u2 = (1/2) r^{-4} e^{r^2/4} (1 + O(r^-2)).
Eigenvalues are exactly the lambda where the solution regular at the origin
carries no u2 component, which is what eigen_refine_shooting root-finds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .errors import BracketError, DomainError, NonConvergenceError
from .grids import (WeightedMeasure, inner_product, norm_l2, values_of)

_TAYLOR_START = 1e-3


@dataclass
class DiscreteOperator:
    """Symmetric tridiagonal form of L in the rho r^4 cell basis."""

    grid: object
    measure: WeightedMeasure
    diag: np.ndarray       # of B = D^{-1/2} (K + V W) D^{-1/2}
    offdiag: np.ndarray
    potential: np.ndarray  # V at every grid node
    conduct: np.ndarray    # face conductances, one per interval
    mass: np.ndarray       # lumped cell masses, interior nodes only

    @property
    def n_interior(self):
        return self.mass.size

    def apply(self, f):
        """Pointwise action of L on full-grid samples (Dirichlet at r_max).

        Returns samples of L f on the grid; the r_max entry is set to zero
        (the boundary row is a constraint, not an equation).
        """
        v = values_of(f)
        if v.shape != self.grid.r.shape:
            raise DomainError("field shape does not match operator grid")
        u = v[:-1]
        g = self.conduct
        flux = g * np.diff(v)  # includes the face into the boundary node
        div = np.empty(self.n_interior)
        div[0] = -flux[0]
        div[1:] = flux[:-1] - flux[1:]
        out = np.zeros_like(v)
        out[:-1] = div / self.mass + self.potential[:-1] * u
        return out

    def quadratic_form(self, f):
        """(L f, f)_rho at the matrix level (exactly symmetric)."""
        v = values_of(f)
        u = v[:-1]
        from .grids import SPHERE_AREA_5D
        stiff = np.dot(self.conduct, np.diff(v) ** 2)
        pot = np.dot(self.potential[:-1] * self.mass, u**2)
        return SPHERE_AREA_5D * (stiff + pot)

    def mass_form(self, f, g=None):
        """(f, g)_rho with the operator's own lumped mass."""
        from .grids import SPHERE_AREA_5D
        v = values_of(f)[:-1]
        w = v if g is None else values_of(g)[:-1]
        return SPHERE_AREA_5D * np.dot(self.mass * v, w)

    def h1_form(self, f):
        """(f, f)_rho + (f', f')_rho at the matrix level."""
        from .grids import SPHERE_AREA_5D
        v = values_of(f)
        stiff = np.dot(self.conduct, np.diff(v) ** 2)
        return SPHERE_AREA_5D * stiff + self.mass_form(f)


@dataclass
class EigenPair:
    eigenvalue: float
    eigenfunction: np.ndarray  # full-grid samples, ||psi||_rho = 1, psi(0)>0
    index: int
    residual_matrix: float     # ||B v - lambda v||_2 (same basis as B)
    residual_apply: float      # ||L psi - lambda psi||_rho via apply()


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    pairs: list
    n_nonpositive: int
    gap: float
    meta: dict = field(default_factory=dict)


def assemble(profile, measure):
    """Discretize L around a profile (or around zero) on the measure's grid.

    profile may be a Profile, a full-grid sample array, or None for the free
    operator (Phi = 0, potential 1, Gaussian weight); the profile and
    measure must live on the same grid.
    """
    grid = measure.grid
    if profile is None:
        phi = np.zeros(grid.n)
    else:
        phi = values_of(profile)
        pgrid = getattr(profile, "grid", None)
        if pgrid is not None and pgrid.r.shape != grid.r.shape:
            raise DomainError("profile and measure grids differ")
        if phi.shape != grid.r.shape:
            raise DomainError("profile samples do not match the grid")
    r = grid.r
    dphi = grid.d1 @ phi
    potential = 1.0 - 2.0 * r * dphi - 12.0 * phi

    h = np.diff(r)
    r_face = 0.5 * (r[:-1] + r[1:])
    log_rho_face = 0.5 * (measure.log_rho[:-1] + measure.log_rho[1:])
    conduct = np.exp(log_rho_face) * r_face**4 / h

    # lumped cells around interior nodes; the r_max node is the Dirichlet row
    faces = np.concatenate([[0.0], r_face])
    mass = np.exp(measure.log_rho[:-1]) * np.diff(faces**5) / 5.0

    g_left = np.concatenate([[0.0], conduct[:-1]])  # no flux through r = 0
    diag = (g_left + conduct) / mass + potential[:-1]
    offdiag = -conduct[:-1] / np.sqrt(mass[:-1] * mass[1:])
    return DiscreteOperator(grid=grid, measure=measure, diag=diag,
                            offdiag=offdiag, potential=potential,
                            conduct=conduct, mass=mass)


def eigen_solve(op, k, refine_with=None, extend_tails=True):
    """k smallest eigenpairs of the discrete operator.

    Sturm-sequence bisection plus inverse iteration on the symmetric
    tridiagonal form. Eigenfunctions are normalized to ||psi||_rho = 1 with
    psi(0) > 0. If refine_with is a second operator assembled on a grid with
    half the spacing, Richardson-extrapolated eigenvalues (4 lf - lc)/3 are
    stored in meta['extrapolated'].

    The eigenvector components live in the sqrt(rho r^4 dr)-scaled basis, so
    unweighting divides by a factor that reaches the machine floor around
    r ~ 14: beyond the last node where the weighted component stands above
    that floor the samples are roundoff noise amplified by e^{+r^2/8}. With
    extend_tails the noisy region is replaced by the decaying-branch
    continuation c r^{2(lambda-1)} fitted just inside the trusted radius
    (the leading far-field exponent of the regular solution); the stitch
    radius is recorded on the pair.
    """
    if k < 1:
        raise DomainError("k must be at least 1")
    if k > op.n_interior:
        raise DomainError("k exceeds the number of interior nodes")
    vals, vecs = eigh_tridiagonal(op.diag, op.offdiag, select="i",
                                  select_range=(0, k - 1))
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    pairs = []
    sqrt_mass = np.sqrt(op.mass)
    for j in range(k):
        v = vecs[:, j]
        rm = _tridiag_residual(op.diag, op.offdiag, vals[j], v)
        psi = np.zeros(op.grid.n)
        psi[:-1] = v / sqrt_mass
        stitch = None
        if extend_tails:
            psi, stitch = _extend_tail(psi, v, float(vals[j]), op.grid)
        nrm = norm_l2(psi, op.measure)
        if nrm == 0:
            raise NonConvergenceError("inverse iteration returned a null "
                                      "vector for index %d" % j)
        psi /= nrm
        anchor = psi[np.argmax(np.abs(psi) > 1e-8 * np.abs(psi).max())]
        if anchor < 0 or (anchor == 0 and psi.sum() < 0):
            psi = -psi
        lpsi = op.apply(psi)
        ra = norm_l2(lpsi - vals[j] * psi, op.measure)
        pair = EigenPair(eigenvalue=float(vals[j]), eigenfunction=psi,
                         index=j, residual_matrix=float(rm),
                         residual_apply=float(ra))
        pair.tail_stitch_radius = stitch
        pairs.append(pair)
    if np.any(np.diff(vals) <= 0):
        raise NonConvergenceError("computed eigenvalues are not strictly "
                                  "increasing; refine the grid")
    n_nonpos = int(np.sum(vals <= 0))
    positive = vals[vals > 0]
    gap = float(positive[0]) if positive.size else np.inf
    meta = {"nodes": op.grid.n, "r_max": op.grid.r_max, "operator": op}
    if refine_with is not None:
        fine = eigen_solve(refine_with, k)
        meta["extrapolated"] = (4.0 * fine.eigenvalues - vals) / 3.0
        meta["fine_nodes"] = refine_with.grid.n
    return SpectrumReport(eigenvalues=vals, pairs=pairs,
                          n_nonpositive=n_nonpos, gap=gap, meta=meta)


def _tridiag_residual(d, e, lam, v):
    w = (d - lam) * v
    w[:-1] += e * v[1:]
    w[1:] += e * v[:-1]
    return np.linalg.norm(w)


def _extend_tail(psi, v, lam, grid):
    """Swap the noise-floor region of an eigenfunction for its decay law.

    v holds the weighted-basis components; nodes where |v| has fallen to the
    roundoff floor carry no information. The replacement shape is the
    leading far-field behavior r^{2(lambda-1)} of the regular branch, with
    the amplitude fitted over the outermost trusted octave.
    """
    floor = 64.0 * np.finfo(float).eps * np.abs(v).max()
    trusted = np.nonzero(np.abs(v) > floor)[0]
    if trusted.size == 0:
        return psi, None
    i_t = trusted[-1]
    r_t = grid.r[i_t]
    if i_t >= grid.n - 2:
        return psi, None
    if r_t < 6.0:
        # deeply negative eigenvalues decay so fast that the mode reaches
        # the floor before any asymptotic band can be fitted; past the
        # trusted radius the true values are far below the floor itself,
        # so zero is the faithful continuation
        if lam <= -4.0:
            out = psi.copy()
            out[grid.r > r_t] = 0.0
            return out, float(r_t)
        return psi, None
    band = (grid.r >= 0.75 * r_t) & (grid.r <= r_t)
    if band.sum() < 4:
        return psi, None
    shape = grid.r[band] ** (2.0 * (lam - 1.0))
    c = np.dot(shape, psi[band]) / np.dot(shape, shape)
    out = psi.copy()
    beyond = grid.r > r_t
    out[beyond] = c * grid.r[beyond] ** (2.0 * (lam - 1.0))
    return out, float(r_t)


# -- shooting refinement ------------------------------------------------------


def eigen_refine_shooting(profile, bracket, r_match=12.0, value_cap=1e12,
                          rtol=1e-12, xtol=1e-12):
    """Refine an eigenvalue by root-finding the Gaussian-branch mismatch.

    Integrates (L - lambda) u = 0 outward from the regular Taylor start
    u(eps) = 1 + (V(0) - lambda) eps^2 / 10 and measures, at the stopping
    radius, the normalized mismatch between the log-derivative of u and that
    of the decaying branch u1 (u'/u ~ 2(lambda-1)/r). The mismatch changes
    sign with the coefficient of the Gaussian-growing branch, so a bracketed
    eigenvalue is found by Brent's method. profile=None refines on the free
    operator.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise DomainError("bracket must be increasing")
    if profile is None:
        phi_f = lambda r: 0.0
        dphi_f = lambda r: 0.0
        v0 = 1.0
    else:
        from .grids import TailedInterpolant
        interp = TailedInterpolant(profile.grid, values_of(profile))
        phi_f = lambda r: float(interp(np.atleast_1d(r))[0])
        dphi_f = lambda r: float(interp.derivative(np.atleast_1d(r))[0])
        v0 = 1.0 - 12.0 * values_of(profile)[0]

    def mismatch(lam):
        eps = _TAYLOR_START
        c2 = (v0 - lam) / 10.0
        y0 = (1.0 + c2 * eps**2, 2.0 * c2 * eps)

        def rhs(r, y):
            u, du = y
            phi = phi_f(r)
            pot = 1.0 - 2.0 * r * dphi_f(r) - 12.0 * phi
            ddu = (pot - lam) * u - (4.0 / r - 0.5 * r + 2.0 * r * phi) * du
            return (du, ddu)

        def too_big(r, y):
            return abs(y[0]) + abs(y[1]) - value_cap

        too_big.terminal = True
        sol = solve_ivp(rhs, (eps, r_match), y0, method="RK45", rtol=rtol,
                        atol=1e-300, events=(too_big,), dense_output=False)
        u, du = sol.y[0][-1], sol.y[1][-1]
        r_stop = sol.t[-1]
        ell1 = 2.0 * (lam - 1.0) / r_stop
        return (du - ell1 * u) / (abs(u) + abs(du))

    m_lo, m_hi = mismatch(lo), mismatch(hi)
    if np.sign(m_lo) == np.sign(m_hi):
        raise BracketError(
            "mismatch does not change sign over (%g, %g); no eigenvalue "
            "bracketed" % (lo, hi))
    return float(brentq(mismatch, lo, hi, xtol=xtol, rtol=8.9e-16))


# -- far-field machinery ------------------------------------------------------


def kummer_reduce(lam):
    """Kummer parameters (a, b) of the reduced far-field equation.

    The substitution u = y^{-3/2} nu(z), y = r^2, z = y/4 turns
    (L_free - lambda) u = 0 into z nu'' + (b - z) nu' - a nu = 0.
    """
    return (-0.5 - lam, -0.5)


@dataclass
class FundamentalPair:
    lam: float
    window: tuple
    wronskian_c: float = 0.5

    def u1(self, r):
        r = np.asarray(r, dtype=float)
        s = 2.0 * (self.lam - 1.0)
        q = -2.0 * (self.lam - 1.0) * (2.0 * self.lam + 1.0)
        return r**s * (1.0 + q / r**2)

    def du1(self, r):
        r = np.asarray(r, dtype=float)
        s = 2.0 * (self.lam - 1.0)
        q = -2.0 * (self.lam - 1.0) * (2.0 * self.lam + 1.0)
        return r ** (s - 1.0) * (s + (s - 2.0) * q / r**2)

    def u2(self, r):
        r = np.asarray(r, dtype=float)
        t = -2.0 * (1.5 + self.lam)
        q = 4.0 * self.lam * (1.5 + self.lam)
        return r**t * np.exp(r**2 / 4.0) * (1.0 + q / r**2)

    def du2(self, r):
        r = np.asarray(r, dtype=float)
        t = -2.0 * (1.5 + self.lam)
        q = 4.0 * self.lam * (1.5 + self.lam)
        return r ** (t - 1.0) * np.exp(r**2 / 4.0) * (
            t + r**2 / 2.0 + (t - 2.0 + r**2 / 2.0) * q / r**2)

    def wronskian_deviation(self):
        """Max relative deviation of u1 u2' - u1' u2 from (C/r^4) e^{r^2/4}."""
        rs = np.linspace(self.window[0], self.window[1], 65)
        w = self.u1(rs) * self.du2(rs) - self.du1(rs) * self.u2(rs)
        ref = self.wronskian_c * rs**-4.0 * np.exp(rs**2 / 4.0)
        return float(np.abs(w / ref - 1.0).max())


def fundamental_pair(lam, r_window):
    """Asymptotic branch evaluators for the free far-field equation."""
    if lam >= 0:
        raise DomainError("fundamental pair is built for lambda < 0")
    lo, hi = float(r_window[0]), float(r_window[1])
    if not (lo >= 2.0 and hi >= lo + 2.0):
        raise DomainError("window too small: need lo >= 2 and hi >= lo + 2")
    return FundamentalPair(lam=float(lam), window=(lo, hi))


def fundamental_pair_validation(pair, rtol=1e-12):
    """Integrate the far-field ODE across the window and compare with u1.

    Seeds at the outer edge with the u1 series and integrates inward: going
    inward the Gaussian-growing branch decays, so the series' truncation
    error cannot be amplified (outward seeding is hopeless: an O(r^-4) seed
    contamination at r=10 grows by e^{(15^2-10^2)/4} ~ e^31 before r=15).
    Returns the max relative deviation from the u1 series over the window.
    """
    lo, hi = pair.window
    lam = pair.lam

    def rhs(r, y):
        u, du = y
        ddu = (1.0 - lam) * u - (4.0 / r - 0.5 * r) * du
        return (du, ddu)

    y0 = (float(pair.u1(hi)), float(pair.du1(hi)))
    rs = np.linspace(hi, lo, 101)
    sol = solve_ivp(rhs, (hi, lo), y0, method="RK45", rtol=rtol, atol=1e-300,
                    t_eval=rs)
    if not sol.success:
        raise NonConvergenceError("far-field integration failed: %s"
                                  % sol.message)
    ref = pair.u1(rs)
    return float(np.abs(sol.y[0] / ref - 1.0).max())


# -- asymptotics and inequality checks ---------------------------------------


def tail_exponent_check(pair, grid, window=(8.0, 16.0)):
    """Log-log decay slope of an eigenfunction against -2(mu+1).

    Only meaningful for nonpositive eigenvalues (the decay law is stated for
    those); positive ones are rejected. The window must sit inside the grid
    and above the truncation floor of the eigenfunction samples.
    """
    if pair.eigenvalue > 0:
        raise DomainError("decay law applies to nonpositive eigenvalues")
    lo, hi = window
    if not (0 < lo < hi <= grid.r_max + 1e-12):
        raise DomainError("window must lie inside the grid")
    mask = (grid.r >= lo) & (grid.r <= hi)
    if mask.sum() < 8:
        raise DomainError("window contains too few nodes")
    psi = np.abs(values_of(pair.eigenfunction)[mask])
    floor = 1e-12 * np.abs(values_of(pair.eigenfunction)).max()
    if psi.min() <= floor:
        raise DomainError("window dominated by truncation noise")
    slope = np.polyfit(np.log(grid.r[mask]), np.log(psi), 1)[0]
    mu = -pair.eigenvalue
    expected = -2.0 * (mu + 1.0)
    return {"slope": float(slope), "expected": float(expected),
            "deviation": float(abs(slope - expected))}


def coercivity_check(f, measure):
    """Quadrature values of (||r f||_rho, ||f||_{H1_rho}).

    Callers assert the relation they need; this function only computes the
    two sides. (The sharp constant between them is dimension-dependent; see
    the tests for what is actually asserted.)
    """
    from .grids import norm_h1
    v = values_of(f)
    lhs = norm_l2(measure.grid.r * v, measure)
    rhs = norm_h1(v, measure)
    return (float(lhs), float(rhs))


def spectral_gap_projection_check(op, report, trials=500, rng=None,
                                  project=True):
    """Empirical min-max check of the spectral gap on random fields.

    Draws random smooth even fields, projects them (in the operator's own
    mass inner product, so the bound is exact linear algebra) orthogonal to
    every nonpositive eigenfunction, and checks the Rayleigh bound
    (L f, f) >= lambda_0 (f, f). With project=False the raw fields are used
    and violations are counted rather than asserted. Also reports the
    empirical constant of the H1-strengthened form (diagnostic only).
    """
    if report.gap == np.inf or not np.isfinite(report.gap):
        raise DomainError("report contains no positive eigenvalue; cannot "
                          "certify that all nonpositive pairs are present")
    if rng is None:
        rng = np.random.default_rng(0)
    grid = op.grid
    r = grid.r
    low_pairs = [p for p in report.pairs if p.eigenvalue <= 0]
    lam0 = report.gap
    violations = 0
    min_ratio = np.inf
    min_h1_ratio = np.inf
    for _ in range(trials):
        coeffs = rng.standard_normal(4)
        width = 2.0 ** rng.uniform(-1.0, 1.0)
        f = np.exp(-(r / (4.0 * width)) ** 2) * (
            coeffs[0] + coeffs[1] * (r / 4.0) ** 2
            + coeffs[2] * (r / 4.0) ** 4 + coeffs[3] * (r / 4.0) ** 6)
        f[-1] = 0.0
        if project:
            for p in low_pairs:
                f = f - (op.mass_form(f, p.eigenfunction)
                         / op.mass_form(p.eigenfunction, p.eigenfunction)
                         ) * p.eigenfunction
        nrm2 = op.mass_form(f)
        if nrm2 <= 0:
            continue
        ray = op.quadratic_form(f) / nrm2
        min_ratio = min(min_ratio, ray / lam0)
        min_h1_ratio = min(min_h1_ratio, op.quadratic_form(f) / op.h1_form(f))
        if ray < lam0 * (1.0 - 1e-10):
            violations += 1
    return {"trials": trials, "violations": violations,
            "min_rayleigh_over_gap": float(min_ratio),
            "h1_constant_empirical": float(min_h1_ratio),
            "gap": float(lam0)}
