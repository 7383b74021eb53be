import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mfgmv.errors import DegenerateLambda, InvalidParameter, SingularVolatility
from mfgmv.model import (InitialDistribution, MarketModel, MeanFieldCurve, Preferences, bound_constants,
                         derive_market, gamma_piecewise)


def test_scalar_market_r_zero():
    dm = derive_market(MarketModel.constant(1.0, 0.0, 0.04, 0.2, n_time=11))
    np.testing.assert_allclose(dm.theta, 0.04)
    np.testing.assert_allclose(dm.lam[:, 0], 0.2)
    np.testing.assert_array_equal(dm.P0, 1.0)


def test_two_asset_diagonal():
    dm = derive_market(MarketModel.constant(1.0, 0.0, [0.1, 0.2], np.diag([0.2, 0.4]), n_time=5))
    np.testing.assert_allclose(dm.lam, 0.5)
    np.testing.assert_allclose(dm.lam_norm, np.sqrt(0.5))


def test_discount_factor_trapezoid():
    dm = derive_market(MarketModel.constant(1.0, 0.05, 0.1, 0.2, n_time=1000))
    assert abs(dm.P0[0] - np.exp(0.05)) < 1e-6
    assert dm.P0[-1] == 1.0
    assert np.all(np.diff(dm.P0) < 0)
    assert dm.P_min == pytest.approx(1.0) and dm.P_max == pytest.approx(np.exp(0.05), abs=1e-6)


def test_integrating_factor_consistency():
    t = np.linspace(0, 1, 2001)
    r = 0.03 + 0.02 * np.sin(3 * t)
    mk = MarketModel(1.0, r, np.tile(0.1, (len(t), 1)), np.tile(0.2, (len(t), 1, 1)))
    dm = derive_market(mk)
    for s in (0.1, 0.5, 0.9):
        int0s = quad(lambda v: 0.03 + 0.02 * np.sin(3 * v), 0, s)[0]
        assert abs(dm.P0_at(s) * np.exp(int0s) - dm.P0[0]) < 1e-8


def test_ellipticity_bounds():
    rng = np.random.default_rng(3)
    sig = np.array([[0.3, 0.05], [0.0, 0.2]])
    mk = MarketModel.constant(1.0, 0.01, [0.05, 0.06], sig)
    smin, smax = mk.ellipticity()
    for _ in range(100):
        a = rng.standard_normal(2)
        q = np.sum((sig.T @ a) ** 2)
        assert smin * a @ a - 1e-14 <= q <= smax * a @ a + 1e-14


def test_singular_and_degenerate():
    with pytest.raises(SingularVolatility):
        derive_market(MarketModel.constant(1.0, 0.0, [0.1, 0.1], np.array([[1.0, 1.0], [1.0, 1.0]])))
    with pytest.raises(DegenerateLambda):
        derive_market(MarketModel.constant(1.0, 0.05, 0.05, 0.2))


def test_negative_rate_rejected():
    with pytest.raises(InvalidParameter):
        MarketModel.constant(1.0, -0.01, 0.05, 0.2)


def test_preferences_invariant():
    with pytest.raises(InvalidParameter, match="Preferences invariant"):
        Preferences(2.0, 1.0)
    with pytest.raises(InvalidParameter):
        Preferences(0.0, 1.0)
    assert Preferences(1.0, 1.0).is_constant


def test_gamma_piecewise_branches():
    m = MeanFieldCurve.constant(np.linspace(0, 1, 5), 1.3)
    p = Preferences(1.0, 2.0)
    assert gamma_piecewise(0.5, 2.3, m, p) == 1.0
    assert gamma_piecewise(0.5, 1.3, m, p) == 2.0
    assert np.all(gamma_piecewise(0.5, np.linspace(-3, 3, 11), m, Preferences(1.5, 1.5)) == 1.5)


@given(st.floats(1e-6, 1.0))
def test_gamma_piecewise_constant_off_boundary(delta):
    m = MeanFieldCurve.constant(np.linspace(0, 1, 5), 0.0)
    p = Preferences(1.0, 2.0)
    assert gamma_piecewise(0.2, delta, m, p) == 1.0
    assert gamma_piecewise(0.2, -delta, m, p) == 2.0


def test_bound_constants_examples():
    dm = derive_market(MarketModel.constant(1.0, 0.0, 0.04, 0.2))
    bc = bound_constants(dm, Preferences(1.0, 2.0), 1.0, 1.0)
    assert bc.kappa == pytest.approx(0.02) and bc.Lambda_bnd == pytest.approx(0.08)
    assert bc.M_bnd == pytest.approx(0.08)
    assert bc.C3 == pytest.approx(0.24) and bc.C4 == pytest.approx(1.24) and bc.C5 == pytest.approx(0.24)
    bc1 = bound_constants(dm, Preferences(1.5, 1.5), 1.0, 1.0)
    assert bc1.kappa == bc1.Lambda_bnd


@pytest.mark.parametrize("xi", [
    InitialDistribution(),
    InitialDistribution("truncated-normal", lo=0.2, hi=1.8, loc=1.0, scale=0.3),
    InitialDistribution("tabulated-density", edges=(0.0, 0.5, 1.0, 2.0), weights=(1.0, 3.0, 2.0)),
])
def test_initial_distribution_unit_mass(xi):
    mass = sum(quad(xi.pdf, a, b, limit=200)[0] for a, b in zip(np.linspace(xi.lo, xi.hi, 9)[:-1],
                                                                np.linspace(xi.lo, xi.hi, 9)[1:]))
    assert abs(mass - 1.0) < 1e-10
    mean = quad(lambda x: x * xi.pdf(x), xi.lo, xi.hi, points=list(xi.edges) or None, limit=200)[0]
    assert mean == pytest.approx(xi.mean, abs=1e-9)
    q = np.linspace(0.01, 0.99, 7)
    np.testing.assert_allclose(xi.cdf(xi.ppf(q)), q, atol=1e-10)


def test_initial_distribution_rejects_unbounded():
    with pytest.raises(InvalidParameter):
        InitialDistribution(lo=1.0, hi=np.inf)
    with pytest.raises(InvalidParameter):
        InitialDistribution("lognormal")


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30))
def test_curve_lipschitz_is_max_slope(vals):
    t = np.linspace(0, 1, len(vals))
    c = MeanFieldCurve(t, np.array(vals))
    assert c.lipschitz == pytest.approx(np.max(np.abs(np.diff(vals))) * (len(vals) - 1))
    assert c.sup_diff(c) == 0.0
