import numpy as np
import pytest

from mfgmv.fixedpoint import FixedPointConfig, Problem, epsilon_continuation
from mfgmv.model import InitialDistribution, MarketModel, MeanFieldCurve, Preferences, derive_market
from mfgmv.mollify import MollifierKernel
from mfgmv.pde import SchemeOptions, make_grid, solve_regularized_pde

CANONICAL_SCHEDULE = (0.2, 0.1, 0.05, 0.025)


def oracle_market(n_time=401):
    """r = 0, |lambda| = 0.2, T = 1."""
    return derive_market(MarketModel.constant(1.0, 0.0, 0.04, 0.2, n_time=n_time))


def canonical_market(n_time=401):
    return derive_market(MarketModel.constant(1.0, 0.02, 0.06, 0.2, n_time=n_time))


@pytest.fixture(scope="session")
def dm_oracle():
    return oracle_market()


@pytest.fixture(scope="session")
def dm_canonical():
    return canonical_market()


@pytest.fixture(scope="session")
def xi_uniform():
    return InitialDistribution()


@pytest.fixture(scope="session")
def constant_problem(dm_oracle, xi_uniform):
    prefs = Preferences(1.0, 1.0)
    return Problem(dm_oracle, prefs, xi_uniform, make_grid(dm_oracle, prefs, xi_uniform, 401, 401))


@pytest.fixture(scope="session")
def piecewise_problem(dm_canonical, xi_uniform):
    prefs = Preferences(1.0, 2.0)
    return Problem(dm_canonical, prefs, xi_uniform, make_grid(dm_canonical, prefs, xi_uniform, 401, 601))


@pytest.fixture(scope="session")
def constant_eq(constant_problem):
    cfg = FixedPointConfig(damping=1.0, epsilon_schedule=(0.2, 0.1, 0.05))
    return epsilon_continuation(constant_problem, cfg)


@pytest.fixture(scope="session")
def piecewise_eq(piecewise_problem):
    return epsilon_continuation(piecewise_problem, FixedPointConfig(epsilon_schedule=CANONICAL_SCHEDULE))


@pytest.fixture(scope="session")
def piecewise_sol_m1(dm_oracle, xi_uniform):
    """Piecewise risk aversion against the frozen curve m = 1, eps = 0.05, r = 0."""
    prefs = Preferences(1.0, 2.0)
    grid = make_grid(dm_oracle, prefs, xi_uniform, 401, 601)
    m = MeanFieldCurve.constant(grid.t, 1.0)
    kernel = MollifierKernel("quartic-polynomial", 0.05)
    sol = solve_regularized_pde(dm_oracle, prefs, m, kernel, grid, SchemeOptions())
    return sol, m, kernel, prefs


def rng(seed=0):
    return np.random.default_rng(seed)
