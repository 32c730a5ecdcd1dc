"""Self-similar collapse profiles of the partial-mass equation.

A profile is a positive, bounded, even solution of

    Phi'' + (4/r) Phi' - Phi - (r/2) Phi' + 6 Phi^2 + 2 r Phi Phi' = 0

decaying like c / r^2 with c in (0, 2]. The ground profile is known in closed
form, Phi_0 = 2 / (2 + r^2) (center value 1, tail coefficient 2); the excited
profiles Phi_n have increasing center values and are found by shooting:

* integrate outward from a fourth-order series start at r = eps with center
  value a; the far field carries a Gaussian-growing mode ~ e^{r^2/4}, so a
  generic trajectory departs from the decaying regime either downward (Phi
  crosses zero, "overshoot") or upward ("blowup"). Upward departures do not
  run off to infinity: the anti-damping term (r/2)(1 - 4 Phi) Phi' shuts off
  once Phi > 1/4 and the trajectory folds back through zero. What survives
  the fold is the partial-mass spike: r^2 Phi rises past 2, which no
  trajectory does otherwise (2 is the critical tail level, attained only in
  the limit by the ground profile), so "blowup" is declared when r^2 Phi
  crosses a spike threshold, armed once Phi has dropped below 1/4;
* the classification flips exactly at the connecting orbits, so bisection on
  the trajectory class pins the center value a_n;
* the full-grid samples are then produced by stitching the trajectory to the
  two-term far-field expansion Phi ~ c/r^2 + 2c(1-c)/r^4 and polishing with a
  Newton iteration on the grid's own collocation operators, closed at r_max
  by the nonlinear Robin condition Lambda Phi + 2 d(c)/r^4 = 0 coming from
  that expansion (d(c) = 2c(1-c), c = r^2 Phi).

The reported residual certificate is evaluated with the same public
operators (stationary_residual), so it is meaningful on every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import spsolve

from .errors import (BracketError, CertificationError, DomainError,
                     NonConvergenceError)
from .grids import (RadialGrid, lambda_op, lambda_prime_op, laplacian_radial,
                    values_of)

DECAY_LIKE = "decay_like"
OVERSHOOT = "overshoot"
BLOWUP = "blowup"
AMBIGUOUS = "ambiguous"

_SERIES_START = 1e-3  # outward integration starts here, off the r=0 singularity


@dataclass
class Profile:
    """A certified stationary profile on a grid."""

    n: int
    a_n: float
    grid: RadialGrid
    samples: np.ndarray
    tail_c: float
    residual_sup: float
    meta: dict = field(default_factory=dict)

    @property
    def values(self):
        return self.samples


@dataclass
class ShootResult:
    """Outcome of one outward integration of the profile ODE."""

    a: float
    classification: str
    r_end: float
    sol: object  # scipy OdeSolution (dense output)


def phi0_exact(grid):
    """The closed-form ground profile 2/(2 + r^2) as a certified Profile."""
    samples = 2.0 / (2.0 + grid.r**2)
    res = stationary_residual(samples, grid)
    return Profile(n=0, a_n=1.0, grid=grid, samples=samples, tail_c=2.0,
                   residual_sup=float(np.abs(res).max()),
                   meta={"construction": "exact"})


def u0_exact(grid):
    """Original-variables ground density 4(6 + r^2)/(2 + r^2)^2.

    Its partial mass is exactly phi0_exact.
    """
    return 4.0 * (6.0 + grid.r**2) / (2.0 + grid.r**2) ** 2


def stationary_residual(phi, grid):
    """Residual field of the stationary equation at given samples.

    Delta Phi - (1/2) Lambda Phi + 6 Phi^2 + Lambda'(Phi^2), evaluated with
    the grid's collocation operators. Identically zero (to stencil accuracy)
    on true profiles.
    """
    v = values_of(phi)
    return (laplacian_radial(v, grid) - 0.5 * lambda_op(v, grid)
            + 6.0 * v**2 + lambda_prime_op(v**2, grid))


# -- shooting ----------------------------------------------------------------


def _series_start(a, eps):
    """Fourth-order even series of the regular solution at the origin."""
    c2 = (a - 6.0 * a**2) / 10.0
    c4 = c2 * (1.0 - 8.0 * a) / 14.0
    phi = a + c2 * eps**2 + c4 * eps**4
    dphi = 2.0 * c2 * eps + 4.0 * c4 * eps**3
    return phi, dphi


def _profile_rhs(r, y):
    phi, dphi = y
    ddphi = (-(4.0 / r) * dphi + phi + 0.5 * r * dphi
             - 6.0 * phi**2 - 2.0 * r * phi * dphi)
    return (dphi, ddphi)


def shoot_profile(a, r_max=30.0, spike_level=2.5, rtol=1e-10, atol=None,
                  settle_tol=1e-2):
    """Integrate the profile ODE outward and classify the trajectory.

    Classes: 'overshoot' (Phi crossed zero), 'blowup' (the Gaussian-growing
    mode carried r^2 Phi up through spike_level; armed once Phi < 1/4 so the
    near-origin hump of large center values cannot trip it; the constant
    solution a = 1/6 lands here since r^2 Phi grows without bound),
    'decay_like' (reached r_max with r^2 Phi positive and settled to within
    settle_tol relative variation over the last tenth of the radius),
    'ambiguous' otherwise (reached r_max but the tail had not settled).
    """
    if a <= 0:
        raise DomainError("center value must be positive")
    if atol is None:
        atol = 1e-14 * max(1.0, a)
    eps = _SERIES_START
    y0 = _series_start(a, eps)
    armed = a < 0.25  # below 1/4 from the start: spike event live immediately

    def hit_zero(r, y):
        return y[0]

    hit_zero.terminal = True
    hit_zero.direction = -1.0

    def spike(r, y):
        if not armed:
            return -1.0
        return r**2 * y[0] - spike_level

    spike.terminal = True
    spike.direction = 1.0

    def arm(r, y):
        return y[0] - 0.25

    arm.terminal = True
    arm.direction = -1.0

    events = (hit_zero, spike) if armed else (hit_zero, spike, arm)
    t0, segments = eps, []
    for _ in range(2):
        sol = solve_ivp(_profile_rhs, (t0, r_max), y0, method="RK45",
                        rtol=rtol, atol=atol, dense_output=True,
                        events=events)
        segments.append(sol)
        if sol.status == 1 and not armed and sol.t_events[2].size:
            # Phi fell below 1/4: arm the spike event and resume
            armed = True
            t0 = float(sol.t_events[2][0])
            y0 = sol.sol(t0)
            events = (hit_zero, spike)
            continue
        break
    dense = _PiecewiseSolution(segments) if len(segments) > 1 else sol.sol
    if sol.status == 1:
        if sol.t_events[0].size:
            cls, r_end = OVERSHOOT, float(sol.t_events[0][0])
        else:
            cls, r_end = BLOWUP, float(sol.t_events[1][0])
    elif sol.status == 0:
        r_end = r_max
        rs = np.linspace(0.9 * r_max, r_max, 33)
        tail = rs**2 * dense(rs)[0]
        mean = np.abs(tail).mean()
        settled = mean > 0 and (tail.max() - tail.min()) < settle_tol * mean
        cls = DECAY_LIKE if settled and tail.min() > 0 else AMBIGUOUS
    else:
        cls, r_end = AMBIGUOUS, float(sol.t[-1])
    return ShootResult(a=a, classification=cls, r_end=r_end, sol=dense)


class _PiecewiseSolution:
    """Dense output spliced from consecutive integration segments."""

    def __init__(self, segments):
        self._sols = [s.sol for s in segments]
        self._breaks = np.array([s.sol.t_max for s in segments])

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        rr = np.atleast_1d(r)
        out = np.empty((2, rr.size))
        idx = np.searchsorted(self._breaks[:-1], rr, side="left")
        for k, s in enumerate(self._sols):
            m = idx == k
            if m.any():
                out[:, m] = s(rr[m])
        return out[:, 0] if scalar else out


def _bisect_transition(a_lo, a_hi, cls_lo, cls_hi, r_shoot, tol, shoot_kw):
    """Bisect a classification transition down to bracket width tol."""
    flip = {OVERSHOOT: BLOWUP, BLOWUP: OVERSHOOT}
    if cls_lo not in flip or cls_hi != flip[cls_lo]:
        raise BracketError(
            "bracket endpoints classify as (%s, %s); need one overshoot "
            "and one blowup" % (cls_lo, cls_hi))
    history = [(a_lo, cls_lo), (a_hi, cls_hi)]
    best_decay = None
    for _ in range(200):
        if (a_hi - a_lo) <= tol:
            break
        mid = 0.5 * (a_lo + a_hi)
        res = shoot_profile(mid, r_max=r_shoot, **shoot_kw)
        history.append((mid, res.classification))
        if res.classification == cls_lo:
            a_lo = mid
        elif res.classification == cls_hi:
            a_hi = mid
        elif res.classification == DECAY_LIKE:
            # landed on the connecting orbit within integrator resolution
            best_decay = mid
            break
        else:
            raise NonConvergenceError(
                "ambiguous trajectory at a=%.17g during bisection; "
                "increase the shooting radius" % mid)
    else:
        raise NonConvergenceError("bisection exceeded iteration budget")
    a_star = best_decay if best_decay is not None else 0.5 * (a_lo + a_hi)
    return a_star, (a_lo, a_hi), history


def find_profile(n, bracket, grid, tol=1e-12, scan_points=96,
                 residual_tol=1e-6, r_shoot=None, shoot_kw=None):
    """Locate and certify the n-th profile inside a center-value bracket.

    If the bracket endpoints already classify differently the transition is
    bisected directly; otherwise the bracket is scanned on a log-spaced
    ladder and every classification transition found is bisected and
    certified in order of increasing center value. The first certified
    profile is returned (labeled n, the caller's index).
    """
    shoot_kw = dict(shoot_kw or {})
    if r_shoot is None:
        r_shoot = grid.r_max
    if tol <= 0:
        raise DomainError("bisection tolerance must be positive")
    a_lo, a_hi = float(bracket[0]), float(bracket[1])
    if not (0 < a_lo < a_hi):
        raise DomainError("bracket must satisfy 0 < a_lo < a_hi")
    lo = shoot_profile(a_lo, r_max=r_shoot, **shoot_kw)
    hi = shoot_profile(a_hi, r_max=r_shoot, **shoot_kw)
    candidates = []
    if lo.classification != hi.classification:
        candidates.append((a_lo, a_hi, lo.classification, hi.classification))
    else:
        ladder = np.geomspace(a_lo, a_hi, scan_points)
        classes = [lo.classification]
        for a in ladder[1:-1]:
            classes.append(shoot_profile(a, r_max=r_shoot,
                                         **shoot_kw).classification)
        classes.append(hi.classification)
        for k in range(len(ladder) - 1):
            if classes[k] != classes[k + 1]:
                candidates.append((ladder[k], ladder[k + 1],
                                   classes[k], classes[k + 1]))
    if not candidates:
        raise BracketError("no classification transition inside the bracket")
    last_err = None
    for c_lo, c_hi, k_lo, k_hi in candidates:
        try:
            a_star, final_bracket, history = _bisect_transition(
                c_lo, c_hi, k_lo, k_hi, r_shoot, tol, shoot_kw)
            prof = _assemble_profile(n, a_star, grid, r_shoot,
                                     residual_tol, shoot_kw)
        except (BracketError, CertificationError, NonConvergenceError) as e:
            last_err = e
            continue
        prof.meta.update({"bracket": final_bracket,
                          "bisection_steps": len(history)})
        return prof
    raise CertificationError(
        "no transition in the bracket produced a certified profile "
        "(last failure: %s)" % last_err)


# -- grid assembly and certification ----------------------------------------


def _tail_coefficient(phi_s, r_s):
    """Solve Phi(r_s) = c/r_s^2 + 2c(1-c)/r_s^4 for the tail coefficient."""
    c = phi_s * r_s**2
    for _ in range(8):
        c = phi_s * r_s**2 - 2.0 * c * (1.0 - c) / r_s**2
    return c


def _assemble_profile(n, a_star, grid, r_shoot, residual_tol, shoot_kw):
    """Stitch trajectory + far field onto the grid, Newton-polish, certify."""
    res = shoot_profile(a_star, r_max=r_shoot, **shoot_kw)
    r_div = res.r_end if res.classification in (OVERSHOOT, BLOWUP) \
        else grid.r_max
    r_s = min(0.9 * r_div, grid.r_max)
    if r_s < 6.0:
        raise NonConvergenceError(
            "trajectory at a=%.17g leaves the profile neighborhood at "
            "r=%.3g; bisection tolerance too loose for stitching" % (a_star,
                                                                     r_div))
    r = grid.r
    guess = np.empty(grid.n)
    inner = r <= max(r_s, _SERIES_START)
    # series below the integration start, trajectory up to the stitch radius
    tiny = r < _SERIES_START
    guess[tiny] = a_star + (a_star - 6 * a_star**2) / 10.0 * r[tiny] ** 2
    mid = inner & ~tiny
    guess[mid] = res.sol(r[mid])[0]
    c_tail = _tail_coefficient(float(res.sol(r_s)[0]), r_s)
    outer = ~inner
    guess[outer] = (c_tail / r[outer] ** 2
                    + 2.0 * c_tail * (1.0 - c_tail) / r[outer] ** 4)
    samples, newton_res = _newton_polish(guess, grid)
    resid = stationary_residual(samples, grid)
    # the closure row at r_max is the Robin condition, not the PDE row
    residual_sup = float(np.abs(resid[:-1]).max())
    tail_c, tail_rms = tail_fit(samples, grid)
    if residual_sup > residual_tol:
        raise CertificationError(
            "stationary residual %.3e exceeds %.1e" % (residual_sup,
                                                       residual_tol))
    if samples.min() <= 0:
        raise CertificationError("profile is not positive on the grid")
    if not (0.0 < tail_c <= 2.0 + 1e-9):
        raise CertificationError(
            "tail coefficient %.6g outside (0, 2]" % tail_c)
    return Profile(n=n, a_n=float(samples[0]), grid=grid, samples=samples,
                   tail_c=float(tail_c), residual_sup=residual_sup,
                   meta={"a_shoot": a_star, "newton_residual": newton_res,
                         "tail_rms": float(tail_rms), "stitch_radius": r_s})


def _newton_polish(guess, grid, max_iter=25, tol=1e-11):
    """Newton iteration for the discrete stationary system.

    Rows 0..n-2 are the collocation residual; the last row closes the system
    with Lambda Phi + 2 d(c)/r^4 = 0, d(c) = 2c(1-c), c = r_max^2 Phi(r_max).
    """
    r = grid.r
    n = grid.n
    lap = grid.laplacian_matrix
    d1 = grid.d1
    eye = sparse.identity(n, format="csr")
    base = (lap - eye - sparse.diags(0.5 * r) @ d1).tocsr()
    lam_row = 2.0 * eye[-1] + r[-1] * d1[-1]
    phi = guess.copy()
    fnorm_prev = np.inf
    best_phi, best_fnorm = phi, np.inf
    slow = 0
    for it in range(max_iter):
        f = (lap @ phi - phi - 0.5 * r * (d1 @ phi)
             + 6.0 * phi**2 + 2.0 * r * phi * (d1 @ phi))
        c = r[-1] ** 2 * phi[-1]
        f[-1] = (2.0 * phi[-1] + r[-1] * (d1[-1] @ phi).item()
                 + 4.0 * c * (1.0 - c) / r[-1] ** 4)
        fnorm = np.abs(f).max()
        if fnorm < best_fnorm:
            best_phi, best_fnorm = phi.copy(), fnorm
        if fnorm <= tol:
            return phi, fnorm
        if fnorm >= 0.5 * fnorm_prev and fnorm < 1e-4:
            # quadratic convergence is over: we are at the roundoff floor of
            # the residual evaluation (~eps * amplitude / h^2); the floor is
            # noisy, so take a few more steps and keep the best iterate
            slow += 1
            if slow >= 3:
                return best_phi, best_fnorm
        else:
            slow = 0
        jac = (base + sparse.diags(12.0 * phi + 2.0 * r * (d1 @ phi))
               + sparse.diags(2.0 * r * phi) @ d1).tolil()
        jac[-1, :] = lam_row.toarray()
        jac[-1, -1] += (4.0 - 8.0 * c) / r[-1] ** 2
        delta = spsolve(jac.tocsc(), f)
        step = 1.0
        for _ in range(8):
            trial = phi - step * delta
            ft = (lap @ trial - trial - 0.5 * r * (d1 @ trial)
                  + 6.0 * trial**2 + 2.0 * r * trial * (d1 @ trial))
            ct = r[-1] ** 2 * trial[-1]
            ft[-1] = (2.0 * trial[-1] + r[-1] * (d1[-1] @ trial).item()
                      + 4.0 * ct * (1.0 - ct) / r[-1] ** 4)
            if np.abs(ft).max() < fnorm or step < 1e-3:
                break
            step *= 0.5
        phi = phi - step * delta
        fnorm_prev = fnorm
    if best_fnorm < 1e-4:
        return best_phi, best_fnorm
    raise NonConvergenceError(
        "profile Newton polish stalled at residual %.3e" % best_fnorm)


def tail_fit(phi, grid, window=(10.0, 20.0)):
    """Tail coefficient by least squares on r^2 Phi over a radial window.

    Fits r^2 Phi against [1, r^-2] and returns (constant term, rms residual
    of the fit). The r^-2 regressor absorbs the first far-field correction;
    without it the window bias on the ground profile (-4/(2+r^2), about 2e-2
    over the default window) would drown the tail coefficient.
    """
    v = values_of(phi)
    lo, hi = window
    if not (0.0 < lo < hi <= grid.r_max + 1e-12):
        raise DomainError("tail window must satisfy 0 < lo < hi <= r_max")
    mask = (grid.r >= lo) & (grid.r <= hi)
    if mask.sum() < 8:
        raise DomainError("tail window contains too few nodes")
    r = grid.r[mask]
    y = r**2 * v[mask]
    x = np.column_stack([np.ones(r.size), r**-2.0])
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    c, rms = float(coef[0]), float(np.sqrt(np.mean(resid**2)))
    if c <= 0.0 or rms > max(abs(c), 1e-300):
        raise DomainError(
            "tail fit rejected: r^2 Phi is not a settled positive constant "
            "over the window (decay-like input required)")
    return c, rms
