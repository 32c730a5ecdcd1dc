"""Transforms between original densities and partial-mass fields.

The radial chemotaxis density u(r) in three dimensions and the partial-mass
field w(r) are linked by

    w(r) = (1 / 2r^3) Int_0^r u(s) s^2 ds,       u = 6 w + 2 r w'.

w solves a scalar semilinear heat equation in five effective dimensions, so
all of the spectral machinery lives on the w side; this module carries data
back and forth and builds the localized dual objects needed to prescribe
admissible initial data in the original variables:

    theta_j  = (1/2) Int_r^inf psi_j rho s ds      (dual weights: testing an
               original density u against theta_j equals testing its partial
               mass against psi_j in the weighted inner product),
    psi_bar_j = chi_R psi_j - r^-3 Int_0^r s^3 psi_j chi_R' ds,
    phi_bar_j = (2/r^2) d/dr (r^3 psi_j) chi_R    (compactly supported),

with chi_R(r) = chi(r/R) a smooth cutoff, identically 1 on [0, R/4] and 0
from R/2 on. phi_bar_j is built so that its partial mass is exactly
psi_bar_j, which lets excited-mode amplitudes be dialed in the original
variables while keeping the perturbation compactly supported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .grids import (RadialGrid, WeightedMeasure, inner_product, pairing_3d,
                    values_of)


def partial_mass(u, grid):
    """Partial-mass field of an original-variables density.

    w(r) = (1/(2 r^3)) Int_0^r u s^2 ds, with the limit u(0)/6 at the origin.
    """
    uv = values_of(u)
    cumulative = grid.cumulative_integral(uv * grid.r**2)
    w = np.empty(grid.n)
    w[0] = uv[0] / 6.0
    w[1:] = cumulative[1:] / (2.0 * grid.r[1:] ** 3)
    return w


def density_from_mass(w, grid):
    """Original-variables density of a partial-mass field: 6 w + 2 r w'."""
    wv = values_of(w)
    return 6.0 * wv + 2.0 * grid.r * (grid.d1 @ wv)


# -- smooth cutoff -----------------------------------------------------------


def _exp_bump(s):
    """exp(-1/s) continued by 0 for s <= 0 (C-infinity at 0)."""
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def smooth_cutoff(r, R):
    """chi(r/R): 1 on [0, R/4], 0 on [R/2, inf), C-infinity in between."""
    r = np.asarray(r, dtype=float)
    s = (r / R - 0.25) / 0.25
    a = _exp_bump(s)
    b = _exp_bump(1.0 - s)
    chi = np.where(s <= 0.0, 1.0, np.where(s >= 1.0, 0.0, b / (a + b + (a + b == 0))))
    return chi


def smooth_cutoff_derivative(r, R):
    """d/dr of smooth_cutoff(r, R)."""
    r = np.asarray(r, dtype=float)
    s = (r / R - 0.25) / 0.25
    inside = (s > 0.0) & (s < 1.0)
    out = np.zeros_like(r)
    si = s[inside]
    a = np.exp(-1.0 / si)
    b = np.exp(-1.0 / (1.0 - si))
    da = a / si**2
    db = -b / (1.0 - si) ** 2
    # chi = b/(a+b): chi' = (b' a - b a')/(a+b)^2  in s, times ds/dr
    out[inside] = (db * a - b * da) / (a + b) ** 2 / (0.25 * R)
    return out


# -- localized mode machinery ------------------------------------------------


@dataclass
class LocalizedModeSet:
    """Dual weights and localized representatives of the retained modes.

    Attributes
    ----------
    measure : WeightedMeasure
    R : float
        Cutoff scale; phi_bar support is [0, R/2].
    indices : list of int
        Mode labels (1-based: 1 is the scaling mode).
    psi : ndarray, shape (n_modes, n_points)
        The eigenmodes the set was built from.
    theta : ndarray, shape (n_modes, n_points)
    psi_bar : ndarray, shape (n_modes, n_points)
    phi_bar : ndarray, shape (n_modes, n_points)
    chi : ndarray
        The cutoff sampled on the grid.
    """

    measure: WeightedMeasure
    R: float
    indices: list
    psi: np.ndarray
    theta: np.ndarray
    psi_bar: np.ndarray
    phi_bar: np.ndarray
    chi: np.ndarray

    def fubini_pairing(self, u_bar, j):
        """Pair an original density against theta_j (duality side)."""
        row = self.indices.index(j)
        return pairing_3d(u_bar, self.theta[row], self.measure.grid)


def build_localized_modes(modes, measure, R=20.0):
    """Build LocalizedModeSet for the retained eigenmodes.

    Parameters
    ----------
    modes : sequence
        Eigenmode sample arrays, or objects with a ``psi`` attribute;
        ordered by mode label starting at 1.
    measure : WeightedMeasure
    R : float
        Cutoff scale. Needs R/2 <= r_max so the support closes on-grid.
    """
    grid = measure.grid
    if R <= 0 or R / 2.0 > grid.r_max + 1e-12:
        raise DomainError("cutoff scale R must satisfy 0 < R/2 <= r_max")
    psis = [values_of(getattr(m, "psi", m)) for m in modes]
    chi = smooth_cutoff(grid.r, R)
    dchi = smooth_cutoff_derivative(grid.r, R)
    theta_rows = []
    psi_bar_rows = []
    phi_bar_rows = []
    for psi in psis:
        integrand = psi * measure.rho * grid.r
        cum = grid.cumulative_integral(integrand)
        theta_rows.append(0.5 * (cum[-1] - cum))
        corr_cum = grid.cumulative_integral(grid.r**3 * psi * dchi)
        corr = np.zeros(grid.n)
        nz = grid.r > 0
        corr[nz] = corr_cum[nz] / grid.r[nz] ** 3
        psi_bar_rows.append(chi * psi - corr)
        phi_bar_rows.append(density_from_mass(psi, grid) * chi)
    return LocalizedModeSet(measure=measure, R=float(R),
                            indices=list(range(1, len(psis) + 1)),
                            psi=np.array(psis),
                            theta=np.array(theta_rows),
                            psi_bar=np.array(psi_bar_rows),
                            phi_bar=np.array(phi_bar_rows),
                            chi=chi)


def fubini_check(mode_set, u_bar, j):
    """Both sides of the duality identity for a test density.

    Returns (lhs, rhs): lhs is the weighted inner product of the partial mass
    of u_bar with psi_j; rhs is the pairing of u_bar against theta_j. The two
    agree to quadrature accuracy; the identity is what makes the theta_j
    usable as membership gates on original-variables data.
    """
    grid = mode_set.measure.grid
    row = mode_set.indices.index(j)
    w = partial_mass(u_bar, grid)
    lhs = inner_product(w, mode_set.psi[row], mode_set.measure)
    rhs = mode_set.fubini_pairing(u_bar, j)
    return lhs, rhs
