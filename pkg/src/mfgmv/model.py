"""Market data, preferences, initial wealth law and derived constants.

Coefficient curves are stored as samples on a uniform time grid and are
evaluated between nodes by linear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from .errors import DegenerateLambda, InvalidParameter, SingularVolatility

__all__ = [
    "MarketModel",
    "DerivedMarket",
    "Preferences",
    "InitialDistribution",
    "MeanFieldCurve",
    "BoundConstants",
    "derive_market",
    "gamma_piecewise",
    "bound_constants",
]


def _interp_rows(s, grid, values):
    """Linear interpolation of ``values[i, ...]`` sampled at ``grid[i]``."""
    s = np.asarray(s, dtype=float)
    if values.ndim == 1:
        return np.interp(s, grid, values)
    flat = values.reshape(len(grid), -1)
    out = np.stack([np.interp(s, grid, flat[:, k]) for k in range(flat.shape[1])], axis=-1)
    return out.reshape(s.shape + values.shape[1:])


@dataclass(frozen=True)
class MarketModel:
    """Deterministic market: short rate ``r``, drift ``mu`` and volatility ``sigma``.

    ``r`` has shape (n,), ``mu`` shape (n, d) and ``sigma`` shape (n, d, d), all
    sampled on ``np.linspace(0, T, n)``.
    """

    T: float
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float))
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        n = r.shape[0]
        if mu.ndim == 1:
            mu = mu.reshape(n, 1)
        if sigma.ndim == 1:
            sigma = sigma.reshape(n, 1, 1)
        if not self.T > 0:
            raise InvalidParameter(f"horizon T must be positive, got {self.T}")
        if n < 2:
            raise InvalidParameter("market curves need at least two time samples")
        d = mu.shape[1]
        if mu.shape != (n, d) or sigma.shape != (n, d, d):
            raise InvalidParameter(
                f"inconsistent curve shapes r{r.shape} mu{mu.shape} sigma{sigma.shape}"
            )
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise InvalidParameter("market curves must be finite")
        # r = 0 is admitted for oracle runs; the model itself asks for r > 0.
        if np.any(r < 0):
            raise InvalidParameter("risk-free rate must be nonnegative")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def constant(cls, T, r, mu, sigma, n_time=2):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        d = mu.shape[0]
        sigma = np.asarray(sigma, dtype=float).reshape(d, d)
        return cls(
            T=T,
            r=np.full(n_time, float(r)),
            mu=np.tile(mu, (n_time, 1)),
            sigma=np.tile(sigma, (n_time, 1, 1)),
        )

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def t(self):
        return np.linspace(0.0, self.T, self.r.shape[0])

    def ellipticity(self):
        """Extreme eigenvalues of sigma sigma^T over the grid."""
        eig = np.linalg.eigvalsh(self.sigma @ np.swapaxes(self.sigma, 1, 2))
        return float(eig.min()), float(eig.max())


@dataclass(frozen=True)
class DerivedMarket:
    T: float
    t: np.ndarray
    r: np.ndarray
    sigma: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    lam_norm: np.ndarray
    P0: np.ndarray
    lam2_tail: np.ndarray
    lambda_min: float
    lambda_max: float
    P_min: float
    P_max: float
    r_max: float
    sigma_min: float
    sigma_max: float

    @property
    def d(self):
        return self.theta.shape[1]

    def r_at(self, s):
        return np.interp(s, self.t, self.r)

    def P0_at(self, s):
        return np.interp(s, self.t, self.P0)

    def lam_norm_at(self, s):
        return np.interp(s, self.t, self.lam_norm)

    def lam2_tail_at(self, s):
        """Integral of |lambda|^2 over [s, T]."""
        return np.interp(s, self.t, self.lam2_tail)

    def lam_at(self, s):
        return _interp_rows(s, self.t, self.lam)

    def theta_at(self, s):
        return _interp_rows(s, self.t, self.theta)

    def sigma_at(self, s):
        return _interp_rows(s, self.t, self.sigma)


def derive_market(model: MarketModel, cond_max: float = 1e10) -> DerivedMarket:
    """Risk premium, market price of risk, discount factor and their bounds."""
    t = model.t
    conds = np.linalg.cond(model.sigma)
    if not np.all(np.isfinite(conds)) or np.any(conds > cond_max):
        bad = int(np.argmax(np.where(np.isfinite(conds), conds, np.inf)))
        raise SingularVolatility(f"sigma(t) ill-conditioned at t={t[bad]:.6g} (cond={conds[bad]:.3g})")
    theta = model.mu - model.r[:, None]
    lam = np.linalg.solve(model.sigma, theta[..., None])[..., 0]
    lam_norm = np.linalg.norm(lam, axis=1)
    if lam_norm.min() <= 1e-14:
        raise DegenerateLambda("market price of risk vanishes somewhere on [0, T]")

    # Integrals over [t, T] by composite trapezoid on the sampling grid.
    rev = cumulative_trapezoid(model.r[::-1], -t[::-1], initial=0.0)[::-1]
    P0 = np.exp(rev)
    P0[-1] = 1.0
    lam2_tail = cumulative_trapezoid((lam_norm**2)[::-1], -t[::-1], initial=0.0)[::-1]

    smin, smax = model.ellipticity()
    return DerivedMarket(
        T=model.T,
        t=t,
        r=model.r.copy(),
        sigma=model.sigma.copy(),
        theta=theta,
        lam=lam,
        lam_norm=lam_norm,
        P0=P0,
        lam2_tail=lam2_tail,
        lambda_min=float(lam_norm.min()),
        lambda_max=float(lam_norm.max()),
        P_min=float(P0.min()),
        P_max=float(P0.max()),
        r_max=float(model.r.max()),
        sigma_min=smin,
        sigma_max=smax,
    )


@dataclass(frozen=True)
class Preferences:
    gamma1: float
    gamma2: float

    def __post_init__(self):
        g1, g2 = float(self.gamma1), float(self.gamma2)
        if not (0 < g1 <= g2):
            raise InvalidParameter(
                f"Preferences invariant violated: need 0 < gamma1 <= gamma2, got gamma1={g1}, gamma2={g2}"
            )
        object.__setattr__(self, "gamma1", g1)
        object.__setattr__(self, "gamma2", g2)

    @property
    def is_constant(self):
        return self.gamma1 == self.gamma2


_KINDS = ("uniform", "truncated-normal", "tabulated-density")


@dataclass(frozen=True)
class InitialDistribution:
    """Bounded, atomless law of initial wealth.

    ``tabulated-density`` is a histogram: ``edges`` (k+1 increasing points
    spanning [lo, hi]) and ``weights`` (k nonnegative bin heights, normalized
    on construction).
    """

    kind: str = "uniform"
    lo: float = 0.5
    hi: float = 1.5
    loc: float = 1.0
    scale: float = 0.25
    edges: tuple = ()
    weights: tuple = ()
    _cum: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidParameter(f"unknown initial distribution kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "tabulated-density":
            e = np.asarray(self.edges, dtype=float)
            w = np.asarray(self.weights, dtype=float)
            if e.ndim != 1 or len(e) < 2 or len(w) != len(e) - 1:
                raise InvalidParameter("tabulated density needs k+1 edges and k weights")
            if np.any(np.diff(e) <= 0) or np.any(w < 0) or w.sum() <= 0:
                raise InvalidParameter("tabulated density needs increasing edges and nonnegative weights")
            mass = np.sum(w * np.diff(e))
            w = w / mass
            object.__setattr__(self, "edges", tuple(e))
            object.__setattr__(self, "weights", tuple(w))
            object.__setattr__(self, "lo", float(e[0]))
            object.__setattr__(self, "hi", float(e[-1]))
            object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(w * np.diff(e))]))
        if not (np.isfinite(self.lo) and np.isfinite(self.hi) and self.hi > self.lo):
            raise InvalidParameter(f"initial wealth support must be a bounded interval, got [{self.lo}, {self.hi}]")
        if self.kind == "truncated-normal" and not self.scale > 0:
            raise InvalidParameter("truncated-normal scale must be positive")

    def _truncnorm(self):
        a = (self.lo - self.loc) / self.scale
        b = (self.hi - self.loc) / self.scale
        return stats.truncnorm(a, b, loc=self.loc, scale=self.scale)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            return np.where((x >= self.lo) & (x <= self.hi), 1.0 / (self.hi - self.lo), 0.0)
        if self.kind == "truncated-normal":
            return self._truncnorm().pdf(x)
        e, w = np.asarray(self.edges), np.asarray(self.weights)
        idx = np.clip(np.searchsorted(e, x, side="right") - 1, 0, len(w) - 1)
        return np.where((x >= e[0]) & (x <= e[-1]), w[idx], 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "uniform":
            return np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0)
        if self.kind == "truncated-normal":
            return self._truncnorm().cdf(x)
        return np.interp(x, np.asarray(self.edges), self._cum)

    def ppf(self, q):
        q = np.asarray(q, dtype=float)
        if self.kind == "uniform":
            return self.lo + q * (self.hi - self.lo)
        if self.kind == "truncated-normal":
            return self._truncnorm().ppf(q)
        return np.interp(q, self._cum, np.asarray(self.edges))

    @property
    def mean(self):
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        if self.kind == "truncated-normal":
            return float(self._truncnorm().mean())
        e, w = np.asarray(self.edges), np.asarray(self.weights)
        return float(np.sum(w * (e[1:] ** 2 - e[:-1] ** 2)) / 2.0)

    @property
    def std(self):
        if self.kind == "uniform":
            return (self.hi - self.lo) / np.sqrt(12.0)
        if self.kind == "truncated-normal":
            return float(self._truncnorm().std())
        e, w = np.asarray(self.edges), np.asarray(self.weights)
        second = np.sum(w * (e[1:] ** 3 - e[:-1] ** 3)) / 3.0
        return float(np.sqrt(max(second - self.mean**2, 0.0)))


@dataclass(frozen=True)
class MeanFieldCurve:
    """Candidate population-average wealth sampled on a time grid."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise InvalidParameter("mean-field curve needs matching 1-d time and value arrays")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, t, value):
        t = np.asarray(t, dtype=float)
        return cls(t, np.full_like(t, float(value)))

    def __call__(self, s):
        return np.interp(s, self.t, self.values)

    @property
    def lipschitz(self):
        if len(self.t) < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.values)) / np.diff(self.t)))

    def sup_diff(self, other: "MeanFieldCurve") -> float:
        return float(np.max(np.abs(self.values - other(self.t))))


def gamma_piecewise(t, x, m: MeanFieldCurve, prefs: Preferences):
    """Peer-based risk-aversion: gamma1 strictly above m(t), gamma2 at or below."""
    x = np.asarray(x, dtype=float)
    return np.where(x > m(t), prefs.gamma1, prefs.gamma2)


@dataclass(frozen=True)
class BoundConstants:
    kappa: float
    Lambda_bnd: float
    M_bnd: float
    C3: float
    C4: float
    C5: float
    M1_cap: float = 10.0


def bound_constants(dm: DerivedMarket, prefs: Preferences, M1_observed: float,
                    xi_mean: float, M1_cap: float = 10.0) -> BoundConstants:
    g1, g2 = prefs.gamma1, prefs.gamma2
    kappa = 0.5 * dm.lambda_min**2 * g1**2
    Lam = 0.5 * dm.lambda_max**2 * g2**2
    M = dm.lambda_max**2 * g2
    C3 = dm.lambda_max**2 / dm.P_min * g2 * (2.0 + M1_observed)
    C4 = (abs(xi_mean) + C3 * dm.T) * np.exp(dm.r_max * dm.T)
    C5 = dm.r_max * C4 + C3
    return BoundConstants(kappa, Lam, M, C3, float(C4), float(C5), M1_cap)
