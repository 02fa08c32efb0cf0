import numpy as np
import pytest

from blayer.assembly import assemble
from blayer.data import default_problem, trivial_problem
from blayer.grid import make_grid
from blayer.pipeline import build_profiles


@pytest.fixture(scope="session")
def small_grid():
    return make_grid(0.1, 20.0, 33, 257, "tanh(3)")


@pytest.fixture(scope="session")
def default_profiles(small_grid):
    return build_profiles(default_problem(1e-3), small_grid)


@pytest.fixture(scope="session")
def default_approx(default_profiles):
    P = default_profiles
    return assemble(P.pd, P.lf, P.corr)


@pytest.fixture(scope="session")
def trivial_profiles(small_grid):
    return build_profiles(trivial_problem(1e-3), small_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
