"""Shared expensive fixtures: certified profiles and their spectra.

Everything here is deterministic, so session scope is safe; the acceptance
tests deliberately avoid these fixtures and recompute their own inputs so
their timing assertions measure real work.
"""

import numpy as np
import pytest

from kslab.flow import localized_modes_for
from kslab.grids import build_measure, gaussian_measure, make_grid, \
    make_layer_grid
from kslab.profiles import find_profile, phi0_exact
from kslab.spectrum import assemble, eigen_solve


@pytest.fixture(scope="session")
def grid():
    return make_grid(r_max=30.0, n_points=4001)


@pytest.fixture(scope="session")
def layer_grid():
    return make_layer_grid()


@pytest.fixture(scope="session")
def profile0(grid):
    return phi0_exact(grid)


@pytest.fixture(scope="session")
def profile0_shot(grid):
    return find_profile(0, (0.5, 5.0), grid)


@pytest.fixture(scope="session")
def profile1(layer_grid):
    return find_profile(1, (250.0, 350.0), layer_grid)


@pytest.fixture(scope="session")
def measure0(profile0):
    return build_measure(profile0)


@pytest.fixture(scope="session")
def gauss_measure(grid):
    return gaussian_measure(grid)


@pytest.fixture(scope="session")
def spectrum0(profile0, measure0):
    op = assemble(profile0, measure0)
    return eigen_solve(op, 4)


@pytest.fixture(scope="session")
def spectrum1(profile1):
    op = assemble(profile1, build_measure(profile1))
    return eigen_solve(op, 4)


@pytest.fixture(scope="session")
def modes0(profile0, spectrum0):
    return localized_modes_for(profile0, spectrum0)


@pytest.fixture(scope="session")
def modes1(profile1, spectrum1):
    return localized_modes_for(profile1, spectrum1)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
