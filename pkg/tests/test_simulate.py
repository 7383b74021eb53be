import numpy as np
import pytest

from mfgmv.density import evolve_density, initial_aux_density, mean_wealth_from_density
from mfgmv.errors import InvalidParameter, OutOfRange
from mfgmv.model import MeanFieldCurve, Preferences
from mfgmv.mollify import MollifierKernel, gamma_eps_gap
from mfgmv.pde import SpaceTimeGrid, make_grid, solve_regularized_pde
from mfgmv.simulate import BLOCK, estimate_mean_wealth, lift_paths, simulate_aux_paths

K = MollifierKernel("quartic-polynomial", 0.05)


@pytest.fixture(scope="module")
def constant_setup(dm_oracle, xi_uniform):
    prefs = Preferences(1.0, 1.0)
    grid = make_grid(dm_oracle, prefs, xi_uniform, 401, 401)
    m = MeanFieldCurve.constant(grid.t, 1.0)
    return solve_regularized_pde(dm_oracle, prefs, m, K, grid), prefs, m


def test_single_step_increment_law(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    b = simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 100_000, 5, n_steps=1)
    inc = b.x[:, -1] - b.x[:, 0]
    assert inc.var() == pytest.approx(0.04 * sol.grid.dt, rel=0.03)


def test_zero_noise_hook(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    b = simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 100, 5, zero_noise=True)
    assert np.all(b.x == b.x[:, :1])


def test_driftless_terminal_mean(piecewise_sol_m1, dm_oracle, xi_uniform):
    sol, m, kernel, prefs = piecewise_sol_m1
    b = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 100_000, 11)
    d = b.x[:, -1] - b.x[:, 0]
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(len(d))


def test_determinism_across_workers(piecewise_sol_m1, dm_oracle, xi_uniform, monkeypatch):
    sol, m, kernel, prefs = piecewise_sol_m1
    n = 2 * BLOCK + 17
    runs = [simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, n, 42, workers=w) for w in (1, 3)]
    monkeypatch.setenv("MFGMV_THREADS", "2")
    runs.append(simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, n, 42))
    for r in runs[1:]:
        np.testing.assert_array_equal(r.x, runs[0].x)
        np.testing.assert_array_equal(r.xi, runs[0].xi)
    other = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, n, 43, workers=1)
    assert not np.array_equal(other.x, runs[0].x)


def test_prefix_stability(piecewise_sol_m1, dm_oracle, xi_uniform):
    sol, m, kernel, prefs = piecewise_sol_m1
    small = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, BLOCK, 9)
    big = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 2 * BLOCK, 9)
    np.testing.assert_array_equal(big.x[:BLOCK], small.x)


def test_lift_constant_case(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    b = lift_paths(simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 2000, 1), sol, dm_oracle,
                   prefs, K, m)
    assert np.max(np.abs(b.Q_adj)) <= 1e-10
    np.testing.assert_allclose(b.pi_bar, 1.0, atol=1e-10)
    np.testing.assert_array_equal(b.P_adj[:, -1], 0.0)
    np.testing.assert_allclose(b.X[:, 0], b.xi, atol=1e-9)


def test_lift_identities_piecewise(piecewise_sol_m1, dm_oracle, xi_uniform):
    sol, m, kernel, prefs = piecewise_sol_m1
    b = lift_paths(simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 5000, 2), sol,
                   dm_oracle, prefs, kernel, m)
    np.testing.assert_array_equal(b.P_adj[:, -1], 0.0)
    for j, (k, t) in enumerate(zip(b.record_idx, b.t)):
        gam = gamma_eps_gap(b.X[:, j] - m(t), prefs, kernel)
        lam = dm_oracle.lam_at(t)
        np.testing.assert_allclose(b.Z_rep[:, j], gam[:, None] * lam[None, :], atol=1e-12)
        ux = np.interp(b.x[:, j], sol.grid.x, sol.ux[k])
        expect = (gam * ux / dm_oracle.P0_at(t))[:, None] * np.linalg.solve(dm_oracle.sigma_at(t).T, lam)
        np.testing.assert_allclose(b.pi_bar[:, j], expect, atol=1e-12)


def test_constant_mean_curve(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    b = lift_paths(simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 100_000, 3), sol, dm_oracle,
                   prefs, K, m)
    mean, se = estimate_mean_wealth(b)
    assert np.all(np.abs(mean.values - (1.0 + 0.04 * b.t)) <= 3 * se + 1e-6)


def test_single_path_and_se_scaling(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    one = lift_paths(simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 1, 3), sol, dm_oracle,
                     prefs, K, m)
    mean, se = estimate_mean_wealth(one)
    assert se is None
    np.testing.assert_array_equal(mean.values, one.X[0])
    ses = []
    for n in (20_000, 40_000):
        b = lift_paths(simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, n, 4), sol, dm_oracle,
                       prefs, K, m)
        ses.append(np.median(estimate_mean_wealth(b)[1]))
    assert ses[1] / ses[0] == pytest.approx(1 / np.sqrt(2), rel=0.15)


def test_density_and_monte_carlo_agree(piecewise_sol_m1, dm_oracle, xi_uniform):
    sol, m, kernel, prefs = piecewise_sol_m1
    de = evolve_density(sol, initial_aux_density(sol, xi_uniform, dm_oracle), kernel, dm_oracle, prefs, m)
    dens = mean_wealth_from_density(sol, de, dm_oracle)
    b = lift_paths(simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 100_000, 8), sol,
                   dm_oracle, prefs, kernel, m)
    mc, se = estimate_mean_wealth(b)
    probes = slice(1, None)
    assert np.all(np.abs(mc.values[probes] - dens(b.t[probes])) <= 3 * se[probes] + 5 * sol.grid.dx**2)


def test_vector_noise_same_law(piecewise_sol_m1, dm_oracle, xi_uniform):
    sol, m, kernel, prefs = piecewise_sol_m1
    a = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 50_000, 1)
    v = simulate_aux_paths(sol, xi_uniform, kernel, dm_oracle, prefs, m, 50_000, 2, noise="vector")
    sa, sv = a.x[:, -1].std(), v.x[:, -1].std()
    assert sv == pytest.approx(sa, rel=0.03)


def test_bad_arguments_and_exit(constant_setup, dm_oracle, xi_uniform):
    sol, prefs, m = constant_setup
    with pytest.raises(InvalidParameter):
        simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 0, 1)
    with pytest.raises(InvalidParameter):
        simulate_aux_paths(sol, xi_uniform, K, dm_oracle, prefs, m, 10, 1, noise="pink")
    grid = SpaceTimeGrid(1.0, 401, 0.4, 1.7, 201)
    narrow = solve_regularized_pde(dm_oracle, prefs, m, K, grid)
    with pytest.raises(OutOfRange, match="path"):
        simulate_aux_paths(narrow, xi_uniform, K, dm_oracle, prefs, m, 10_000, 1)
