"""Backward solver for the regularized quasi-linear terminal-value problem

    u_t + D(t, u) u_xx - V(t, u) u_x = 0,    u(T, x) = x,

on a truncated interval with Dirichlet far-field data taken from the
constant-risk-aversion affine solutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import DomainTooSmall, InvalidParameter, InvariantViolation, NonMonotone, OutOfRange, PicardDivergence
from .model import BoundConstants, DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences
from .mollify import MollifierKernel, gamma_eps_gap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpaceTimeGrid:
    T: float
    nt: int
    x_lo: float
    x_hi: float
    nx: int

    def __post_init__(self):
        if self.nt < 2 or self.nx < 3:
            raise InvalidParameter(f"grid needs nt >= 2 and nx >= 3, got nt={self.nt}, nx={self.nx}")
        if not self.x_hi > self.x_lo:
            raise InvalidParameter("grid needs x_hi > x_lo")
        if not self.T > 0:
            raise InvalidParameter("grid needs T > 0")

    @property
    def t(self):
        return np.linspace(0.0, self.T, self.nt)

    @property
    def x(self):
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def dt(self):
        return self.T / (self.nt - 1)

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / (self.nx - 1)


def required_margin(dm: DerivedMarket, prefs: Preferences) -> float:
    """Terminal cone plus six standard deviations of the auxiliary diffusion."""
    M = dm.lambda_max**2 * prefs.gamma2
    return M * dm.T + 6.0 * prefs.gamma2 * dm.lambda_max * np.sqrt(dm.T)


def make_grid(dm: DerivedMarket, prefs: Preferences, xi: InitialDistribution,
              nt: int, nx: int, margin_factor: float = 1.0) -> SpaceTimeGrid:
    if margin_factor < 1.0:
        raise InvalidParameter("margin_factor below 1 violates the grid coverage invariant")
    margin = margin_factor * required_margin(dm, prefs)
    P00 = float(dm.P0[0])
    return SpaceTimeGrid(dm.T, int(nt), P00 * xi.lo - margin, P00 * xi.hi + margin, int(nx))


@dataclass
class SchemeOptions:
    theta: float = 1.0
    advection: str = "central"
    picard_tol: float = 1e-10
    picard_max: int = 50
    max_halvings: int = 6
    cone_tol_factor: float = 10.0
    boundary_layer_tol: float = 1e-8
    M1_cap: float = 10.0
    min_layer_cells: float = 4.0
    check: bool = True

    def __post_init__(self):
        if self.theta not in (0.5, 1.0):
            raise InvalidParameter("theta must be 1 (implicit Euler) or 0.5 (Crank-Nicolson)")
        if self.advection not in ("central", "upwind"):
            raise InvalidParameter("advection must be 'central' or 'upwind'")


@dataclass
class PdeSolution:
    grid: SpaceTimeGrid
    u: np.ndarray
    ux: np.ndarray
    epsilon: float
    m_used: MeanFieldCurve
    picard_iters: np.ndarray
    kernel_kind: str = "quartic-polynomial"
    ux_min: float = field(default=np.nan)
    ux_max: float = field(default=np.nan)

    def _time_weights(self, t):
        g = self.grid
        s = np.clip(float(t), 0.0, g.T) / g.dt
        i = min(int(np.floor(s)), g.nt - 2)
        return i, s - i

    def slice(self, t, which="u"):
        """Spatial slice at time ``t``, linear in time between grid rows."""
        arr = self.u if which == "u" else self.ux
        i, w = self._time_weights(t)
        if w == 0.0:
            return arr[i]
        if w == 1.0:
            return arr[i + 1]
        return (1.0 - w) * arr[i] + w * arr[i + 1]

    def u_at(self, t, x):
        return np.interp(x, self.grid.x, self.slice(t, "u"))

    def ux_at(self, t, x):
        return np.interp(x, self.grid.x, self.slice(t, "ux"))


def _coefficients(w, t, dm, prefs, m, kernel):
    lam2 = dm.lam_norm_at(t) ** 2
    g = gamma_eps_gap(w / dm.P0_at(t) - m(t), prefs, kernel)
    return 0.5 * lam2 * g * g, lam2 * g


def _operator_bands(D, V, dx, advection):
    """Sub, main and super diagonals of the discrete operator L = D d2 - V d1."""
    a = D / dx**2
    if advection == "central":
        b = V / (2.0 * dx)
        return a + b, -2.0 * a, a - b
    b = V / dx
    return a + b, -2.0 * a - b, a


def _apply(sub, diag, sup, v):
    out = np.zeros_like(v)
    out[1:-1] = sub[1:-1] * v[:-2] + diag[1:-1] * v[1:-1] + sup[1:-1] * v[2:]
    return out


def _dirichlet(t, dm, prefs, grid):
    tail = dm.lam2_tail_at(t)
    return grid.x_lo - prefs.gamma2 * tail, grid.x_hi - prefs.gamma1 * tail


def _backward_step(u_next, t_next, t_cur, dm, prefs, m, kernel, grid, opts, depth=0):
    dt = t_next - t_cur
    dx = grid.dx
    th = opts.theta
    rhs = u_next.copy()
    if th < 1.0:
        D, V = _coefficients(u_next, t_next, dm, prefs, m, kernel)
        rhs += dt * (1.0 - th) * _apply(*_operator_bands(D, V, dx, opts.advection), u_next)
    rhs[0], rhs[-1] = _dirichlet(t_cur, dm, prefs, grid)

    ab = np.zeros((3, grid.nx))
    w = u_next.copy()
    history = []
    # constant risk aversion: coefficients do not depend on u, one solve is exact
    max_iter = 1 if prefs.is_constant else opts.picard_max
    for k in range(1, max_iter + 1):
        D, V = _coefficients(w, t_cur, dm, prefs, m, kernel)
        sub, diag, sup = _operator_bands(D, V, dx, opts.advection)
        ab[0, 2:] = -dt * th * sup[1:-1]
        ab[1, 1:-1] = 1.0 - dt * th * diag[1:-1]
        ab[2, :-2] = -dt * th * sub[1:-1]
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = ab[2, -2] = 0.0
        w_new = solve_banded((1, 1), ab, rhs, check_finite=False)
        delta = float(np.max(np.abs(w_new - w)))
        w = w_new
        history.append(delta)
        if delta <= opts.picard_tol or prefs.is_constant:
            return w, k

    if depth >= opts.max_halvings:
        raise PicardDivergence(
            f"coefficient iteration stalled at t={t_cur:.6g} after {opts.picard_max} sweeps "
            f"(last updates {history[-3:]}); dt halved {depth} times"
        )
    log.debug("picard retry at t=%.6g with dt/2 (depth %d)", t_cur, depth + 1)
    t_mid = 0.5 * (t_next + t_cur)
    u_mid, k1 = _backward_step(u_next, t_next, t_mid, dm, prefs, m, kernel, grid, opts, depth + 1)
    u_cur, k2 = _backward_step(u_mid, t_mid, t_cur, dm, prefs, m, kernel, grid, opts, depth + 1)
    return u_cur, k1 + k2


def solve_regularized_pde(dm: DerivedMarket, prefs: Preferences, m: MeanFieldCurve,
                          kernel: MollifierKernel, grid: SpaceTimeGrid,
                          opts: SchemeOptions | None = None) -> PdeSolution:
    """March backward from u(T, x) = x with lagged (Picard) coefficients per step."""
    opts = opts or SchemeOptions()
    t = grid.t
    u = np.empty((grid.nt, grid.nx))
    u[-1] = grid.x
    iters = np.zeros(grid.nt - 1, dtype=int)
    for n in range(grid.nt - 2, -1, -1):
        u[n], iters[n] = _backward_step(u[n + 1], t[n + 1], t[n], dm, prefs, m, kernel, grid, opts)

    sol = PdeSolution(grid=grid, u=u, ux=np.empty_like(u), epsilon=kernel.epsilon,
                      m_used=m, picard_iters=iters, kernel_kind=kernel.kind)
    if not opts.check:
        spatial_derivative(sol, strict=False)
        return sol
    spatial_derivative(sol)
    layer = boundary_layer_residual(sol, dm, prefs, kernel)
    if layer > opts.boundary_layer_tol:
        raise DomainTooSmall(
            f"mollified transition reaches the domain edge (residual {layer:.3g}); enlarge the grid margin"
        )
    cone = cone_violation(sol, dm, prefs)
    if cone > opts.cone_tol_factor * grid.dx**2:
        raise InvariantViolation(f"cone bound exceeded by {cone:.3g}; refine the grid")
    if sol.ux_max > opts.M1_cap:
        raise InvariantViolation(f"max u_x = {sol.ux_max:.4g} exceeds cap {opts.M1_cap}")
    return sol


def spatial_derivative(sol: PdeSolution, strict: bool = True):
    """Central differences inside, one-sided at the ends; returns (min, max)."""
    u, dx = sol.u, sol.grid.dx
    ux = np.empty_like(u)
    ux[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * dx)
    ux[:, 0] = (u[:, 1] - u[:, 0]) / dx
    ux[:, -1] = (u[:, -1] - u[:, -2]) / dx
    ux[-1] = 1.0  # derivative of the identity terminal row
    sol.ux = ux
    sol.ux_min, sol.ux_max = float(ux.min()), float(ux.max())
    if strict and sol.ux_min <= 0.0:
        raise NonMonotone(f"u_x reaches {sol.ux_min:.3g} <= 0")
    return sol.ux_min, sol.ux_max


def inverse_slice(row, x, y):
    """Exact inverse of the piecewise-linear interpolant of an increasing slice."""
    return np.interp(y, row, x)


def invert_u(sol: PdeSolution, t: float, y: float, bracket=None, tol=None, max_iter: int = 200) -> float:
    """Solve u(t, x) = y for x by bisection on the piecewise-linear slice."""
    xg = sol.grid.x
    row = sol.slice(t)
    if not (row[0] <= y <= row[-1]):
        raise OutOfRange(
            f"value {y:.6g} outside u({t:.4g}, .) range [{row[0]:.6g}, {row[-1]:.6g}]; grow the domain"
        )
    tol = 1e-10 * (1.0 + abs(y)) if tol is None else tol
    a, b = (xg[0], xg[-1]) if bracket is None else bracket
    fa = np.interp(a, xg, row) - y
    fb = np.interp(b, xg, row) - y
    if fa > 0 or fb < 0:
        a, b = xg[0], xg[-1]
        fa = row[0] - y
    if abs(fa) <= tol:
        return float(a)
    if abs(fb) <= tol:
        return float(b)
    mid = 0.5 * (a + b)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        fm = np.interp(mid, xg, row) - y
        if abs(fm) <= tol or b - a <= 4 * np.finfo(float).eps * max(1.0, abs(mid)):
            break
        if fm < 0:
            a = mid
        else:
            b = mid
    return float(mid)


def cone_violation(sol: PdeSolution, dm: DerivedMarket, prefs: Preferences) -> float:
    """Largest excess of |u - x| over M (T - t); nonpositive when the bound holds."""
    M = dm.lambda_max**2 * prefs.gamma2
    g = sol.grid
    excess = np.abs(sol.u - g.x[None, :]) - M * (g.T - g.t)[:, None]
    return float(excess.max())


def boundary_layer_residual(sol: PdeSolution, dm, prefs, kernel) -> float:
    """Distance of the mollified risk aversion at the two domain edges from gamma2 / gamma1."""
    t = sol.grid.t
    P0 = dm.P0_at(t)
    mt = sol.m_used(t)
    lo = gamma_eps_gap(sol.u[:, 0] / P0 - mt, prefs, kernel)
    hi = gamma_eps_gap(sol.u[:, -1] / P0 - mt, prefs, kernel)
    return float(max(np.max(np.abs(lo - prefs.gamma2)), np.max(np.abs(hi - prefs.gamma1))))


@dataclass
class InvariantReport:
    cone_violation: float
    cone_tol: float
    ux_min: float
    ux_max: float
    M1_cap: float
    monotone: bool
    boundary_layer: float
    boundary_layer_tol: float
    layer_cells: float
    min_layer_cells: float

    @property
    def checks(self):
        return {
            "cone_bound": self.cone_violation <= self.cone_tol,
            "ux_positive": self.ux_min > 0.0,
            "ux_capped": self.ux_max <= self.M1_cap,
            "monotone_slices": self.monotone,
            "boundary_layer": self.boundary_layer <= self.boundary_layer_tol,
            "layer_resolved": self.layer_cells >= self.min_layer_cells,
        }

    @property
    def passes(self):
        return all(self.checks.values())

    @property
    def failed(self):
        return [k for k, ok in self.checks.items() if not ok]

    def as_dict(self):
        out = {k: v for k, v in self.__dict__.items()}
        out.update({f"ok_{k}": v for k, v in self.checks.items()})
        return out


def check_solution_invariants(sol: PdeSolution, bc: BoundConstants, dm: DerivedMarket,
                              prefs: Preferences, kernel: MollifierKernel,
                              opts: SchemeOptions | None = None) -> InvariantReport:
    opts = opts or SchemeOptions()
    g = sol.grid
    excess = np.abs(sol.u - g.x[None, :]) - bc.M_bnd * (g.T - g.t)[:, None]
    if prefs.is_constant:
        cells = np.inf
    else:
        # transition layer in x: 2 eps in wealth units, stretched by P0 / u_x
        cells = 2.0 * kernel.epsilon * dm.P_min / (max(sol.ux_max, 1e-300) * g.dx)
    return InvariantReport(
        cone_violation=float(excess.max()),
        cone_tol=opts.cone_tol_factor * g.dx**2,
        ux_min=float(sol.ux.min()),
        ux_max=float(sol.ux.max()),
        M1_cap=bc.M1_cap,
        monotone=bool(np.all(np.diff(sol.u, axis=1) > 0)),
        boundary_layer=boundary_layer_residual(sol, dm, prefs, kernel),
        boundary_layer_tol=opts.boundary_layer_tol,
        layer_cells=float(cells),
        min_layer_cells=opts.min_layer_cells,
    )
