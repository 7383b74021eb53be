"""Law of the auxiliary process by a forward Kolmogorov solve.

The auxiliary state is a driftless scalar diffusion with volatility
a(t, x) = gamma_eps(t, u(t, x) / P0(t)) |lambda(t)|, so its density obeys

    p_t = 1/2 (a^2 p)_xx.

The scheme is the conservative three-point form of the right-hand side with
implicit Euler in time: columns of the step matrix sum to one (mass) and the
first moment is preserved exactly in the interior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import MassLoss, NegativeDensity, OutOfRange
from .model import DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences
from .mollify import MollifierKernel, gamma_eps_gap
from .pde import PdeSolution, SpaceTimeGrid

MASS_TOL = 1e-6
NEG_TOL = 1e-12


@dataclass
class DensityEvolution:
    grid: SpaceTimeGrid
    p: np.ndarray
    mass_drift: np.ndarray

    def mass(self):
        return self.p.sum(axis=1) * self.grid.dx

    def first_moment(self):
        return self.p @ self.grid.x * self.grid.dx

    def second_moment(self):
        return self.p @ self.grid.x**2 * self.grid.dx


def initial_aux_density(sol: PdeSolution, xi: InitialDistribution, dm: DerivedMarket) -> np.ndarray:
    """Push the initial wealth law through x = v(0, P0(0) xi).

    Cell masses are differences of the wealth CDF at the images of the cell
    faces, which is the integrated form of f(u/P0) u_x / P0 and stays exact
    across jumps of the wealth density.
    """
    g = sol.grid
    row = sol.u[0]
    P00 = float(dm.P0_at(0.0))
    if P00 * xi.lo < row[0] or P00 * xi.hi > row[-1]:
        raise OutOfRange(
            f"initial wealth image [{P00 * xi.lo:.6g}, {P00 * xi.hi:.6g}] not inside "
            f"u(0, .) range [{row[0]:.6g}, {row[-1]:.6g}]"
        )
    faces = np.concatenate([[row[0]], 0.5 * (row[1:] + row[:-1]), [row[-1]]])
    F = xi.cdf(faces / P00)
    p = np.diff(F) / g.dx
    p[0] = p[-1] = 0.0
    p /= p.sum() * g.dx
    return p


def _diffusion_sq(sol, row_u, t, dm, prefs, m, kernel):
    g = gamma_eps_gap(row_u / dm.P0_at(t) - m(t), prefs, kernel)
    return (g * dm.lam_norm_at(t)) ** 2


def evolve_density(sol: PdeSolution, p0: np.ndarray, kernel: MollifierKernel, dm: DerivedMarket,
                   prefs: Preferences, m: MeanFieldCurve, t_end: float | None = None) -> DensityEvolution:
    """Forward implicit-Euler march of p on the PDE grid (absorbing edges)."""
    g = sol.grid
    t = g.t
    n_steps = g.nt - 1 if t_end is None else int(round(t_end / g.dt))
    nx = g.nx
    lam_dt = g.dt / (2.0 * g.dx**2)
    p = np.zeros((n_steps + 1, nx))
    p[0] = p0
    drift = np.zeros(n_steps + 1)
    drift[0] = abs(p0.sum() * g.dx - 1.0)
    ab = np.zeros((3, nx))
    for n in range(n_steps):
        a2 = _diffusion_sq(sol, sol.u[n + 1], t[n + 1], dm, prefs, m, kernel)
        c = lam_dt * a2
        ab[1] = 1.0 + 2.0 * c
        ab[0, 1:] = -c[1:]
        ab[2, :-1] = -c[:-1]
        # Dirichlet p = 0 at both edges
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = 0.0
        ab[2, -2] = 0.0
        rhs = p[n].copy()
        rhs[0] = rhs[-1] = 0.0
        pn = solve_banded((1, 1), ab, rhs, check_finite=False)
        neg = pn.min()
        if neg < -NEG_TOL:
            raise NegativeDensity(f"density reached {neg:.3g} at t={t[n + 1]:.6g}")
        p[n + 1] = np.maximum(pn, 0.0)
        drift[n + 1] = abs(p[n + 1].sum() * g.dx - 1.0)
        if drift[n + 1] > MASS_TOL:
            raise MassLoss(f"|mass - 1| = {drift[n + 1]:.3g} at t={t[n + 1]:.6g}; enlarge the grid margin")
    return DensityEvolution(grid=g, p=p, mass_drift=drift)


def mean_wealth_from_density(sol: PdeSolution, de: DensityEvolution, dm: DerivedMarket) -> MeanFieldCurve:
    """m(t) = integral of u(t, x) / P0(t) against the auxiliary density."""
    g = sol.grid
    n = de.p.shape[0]
    t = g.t[:n]
    vals = np.einsum("ij,ij->i", sol.u[:n], de.p) * g.dx / dm.P0_at(t)
    return MeanFieldCurve(t, vals)
