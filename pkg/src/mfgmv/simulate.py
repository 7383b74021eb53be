"""Euler-Maruyama Monte Carlo of the auxiliary process and the pathwise lift
to wealth, adjoint processes and the equilibrium strategy.

Randomness is drawn per block of ``BLOCK`` consecutive paths from a Philox
(counter-based) stream keyed by ``(seed, block index)``. Blocks are the unit
of parallel work and are merged in index order, so results do not depend on
how many workers run them.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, OutOfRange
from .model import DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences
from .mollify import MollifierKernel, gamma_eps_gap
from .pde import PdeSolution, inverse_slice

BLOCK = 4096


def worker_count(workers=None):
    if workers is None:
        workers = int(os.environ.get("MFGMV_THREADS", "0") or 0)
    if workers <= 0:
        workers = os.cpu_count() or 1
    return workers


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


@dataclass
class PathBundle:
    n_paths: int
    t: np.ndarray
    record_idx: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    seed: int
    dt: float
    rng_kind: str = "philox-block"
    X: np.ndarray | None = None
    P_adj: np.ndarray | None = None
    Q_adj: np.ndarray | None = None
    pi_bar: np.ndarray | None = None
    Z_rep: np.ndarray | None = None


def record_indices(nt: int, n_record: int | None = 11) -> np.ndarray:
    if n_record is None or n_record >= nt:
        return np.arange(nt)
    return np.unique(np.round(np.linspace(0, nt - 1, n_record)).astype(int))


def simulate_aux_paths(sol: PdeSolution, xi: InitialDistribution, kernel: MollifierKernel,
                       dm: DerivedMarket, prefs: Preferences, m: MeanFieldCurve,
                       n_paths: int, seed: int, n_record: int | None = 11,
                       workers: int | None = None, noise: str = "scalar",
                       drift_hook: float = 0.0, zero_noise: bool = False,
                       n_steps: int | None = None) -> PathBundle:
    """Simulate x(t) on the PDE time grid, recording at ``n_record`` evenly spaced nodes.

    ``drift_hook`` (per unit time) and ``zero_noise`` exist for negative
    controls only.
    """
    if n_paths < 1:
        raise InvalidParameter("n_paths must be at least 1")
    if noise not in ("scalar", "vector"):
        raise InvalidParameter("noise must be 'scalar' or 'vector'")
    g = sol.grid
    xg = g.x
    t = g.t
    n_steps = g.nt - 1 if n_steps is None else n_steps
    rec = record_indices(n_steps + 1, n_record)
    slot = -np.ones(n_steps + 1, dtype=int)
    slot[rec] = np.arange(len(rec))
    sdt = np.sqrt(g.dt)
    P0 = dm.P0_at(t)
    mt = m(t)
    lam = dm.lam_at(t)
    lam_norm = dm.lam_norm_at(t)
    P00 = float(P0[0])

    def run_block(bi):
        start = bi * BLOCK
        nb = min(BLOCK, n_paths - start)
        rng = block_rng(seed, bi)
        xi_s = xi.ppf(rng.random(nb))
        x = inverse_slice(sol.u[0], xg, P00 * xi_s)
        out = np.empty((nb, len(rec)))
        if slot[0] >= 0:
            out[:, slot[0]] = x
        for k in range(n_steps):
            uk = np.interp(x, xg, sol.u[k])
            gam = gamma_eps_gap(uk / P0[k] - mt[k], prefs, kernel)
            if noise == "scalar":
                z = rng.standard_normal(nb)
                inc = gam * lam_norm[k] * sdt * z
            else:
                z = rng.standard_normal((nb, lam.shape[1]))
                inc = gam * (z @ lam[k]) * sdt
            if zero_noise:
                inc = np.zeros_like(x)
            x = x + inc + drift_hook * g.dt
            if x.min() < xg[0] or x.max() > xg[-1]:
                bad = int(np.argmax((x < xg[0]) | (x > xg[-1])))
                raise OutOfRange(f"path {start + bad} left the grid at t={t[k + 1]:.6g}; grow the domain")
            if slot[k + 1] >= 0:
                out[:, slot[k + 1]] = x
        return xi_s, out

    n_blocks = -(-n_paths // BLOCK)
    nw = min(worker_count(workers), n_blocks)
    if nw == 1:
        parts = [run_block(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))
    return PathBundle(
        n_paths=n_paths,
        t=t[rec],
        record_idx=rec,
        x=np.concatenate([p[1] for p in parts]),
        xi=np.concatenate([p[0] for p in parts]),
        seed=seed,
        dt=g.dt,
    )


def lift_paths(bundle: PathBundle, sol: PdeSolution, dm: DerivedMarket, prefs: Preferences,
               kernel: MollifierKernel, m: MeanFieldCurve) -> PathBundle:
    """Fill X, P, Q, strategy and Z from the recorded auxiliary states."""
    xg = sol.grid.x
    n, nr = bundle.x.shape
    d = dm.d
    X = np.empty((n, nr))
    P = np.empty((n, nr))
    Q = np.empty((n, nr, d))
    pi = np.empty((n, nr, d))
    Z = np.empty((n, nr, d))
    for j, (k, tj) in enumerate(zip(bundle.record_idx, bundle.t)):
        xj = bundle.x[:, j]
        u = np.interp(xj, xg, sol.u[k])
        ux = np.interp(xj, xg, sol.ux[k])
        P0 = float(dm.P0_at(tj))
        lam = dm.lam_at(tj)
        sig_t = dm.sigma_at(tj).T
        X[:, j] = u / P0
        P[:, j] = xj - u
        gam = gamma_eps_gap(X[:, j] - m(tj), prefs, kernel)
        Q[:, j] = (gam * (1.0 - ux))[:, None] * lam[None, :]
        # strategy from the first-order condition: -(1/P0) sigma^{-T} (Q - gamma lam)
        bracket = Q[:, j] - gam[:, None] * lam[None, :]
        pi[:, j] = -np.linalg.solve(sig_t, bracket.T).T / P0
        Z[:, j] = Q[:, j] + P0 * (pi[:, j] @ sig_t.T)
    bundle.X, bundle.P_adj, bundle.Q_adj, bundle.pi_bar, bundle.Z_rep = X, P, Q, pi, Z
    return bundle


def estimate_mean_wealth(bundle: PathBundle):
    """Sample mean of X at the record times and its standard error.

    The standard error is ``None`` for a single path (undefined).
    """
    mean = bundle.X.mean(axis=0)
    if bundle.n_paths < 2:
        return MeanFieldCurve(bundle.t, mean), None
    se = bundle.X.std(axis=0, ddof=1) / np.sqrt(bundle.n_paths)
    return MeanFieldCurve(bundle.t, mean), se


def advance_paths(sol: PdeSolution, x0: np.ndarray, t0: float, t1: float, n_sub: int,
                  rng: np.random.Generator, dm: DerivedMarket, prefs: Preferences,
                  kernel: MollifierKernel, m: MeanFieldCurve):
    """Euler-Maruyama from arbitrary states over [t0, t1] with bilinear u.

    Returns (times, states) with states of shape (n_sub + 1,) + x0.shape.
    """
    times = np.linspace(t0, t1, n_sub + 1)
    h = (t1 - t0) / n_sub
    xs = np.empty((n_sub + 1,) + np.shape(x0))
    xs[0] = x0
    x = np.array(x0, dtype=float)
    for k in range(n_sub):
        tk = times[k]
        uk = sol.u_at(tk, x)
        gam = gamma_eps_gap(uk / dm.P0_at(tk) - m(tk), prefs, kernel)
        x = x + gam * dm.lam_norm_at(tk) * np.sqrt(h) * rng.standard_normal(x.shape)
        xs[k + 1] = x
    return times, xs
