"""Mean-field consistency by damped Picard iteration and epsilon-continuation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .boundary import BoundaryCurve, separation_boundary
from .density import evolve_density, initial_aux_density, mean_wealth_from_density
from .errors import DomainTooSmall, InvalidParameter, NoConvergence
from .model import (BoundConstants, DerivedMarket, InitialDistribution, MeanFieldCurve, Preferences,
                    bound_constants)
from .mollify import MollifierKernel
from .pde import (InvariantReport, PdeSolution, SchemeOptions, SpaceTimeGrid, check_solution_invariants,
                  solve_regularized_pde)
from .simulate import estimate_mean_wealth, lift_paths, simulate_aux_paths

log = logging.getLogger(__name__)


@dataclass
class Problem:
    """Everything a single Phi evaluation needs besides m and epsilon."""

    dm: DerivedMarket
    prefs: Preferences
    xi: InitialDistribution
    grid: SpaceTimeGrid
    scheme: SchemeOptions = field(default_factory=SchemeOptions)

    def bounds(self, M1_observed: float = 1.0) -> BoundConstants:
        return bound_constants(self.dm, self.prefs, M1_observed, self.xi.mean, self.scheme.M1_cap)

    def epsilon_floor(self) -> float:
        return max(2.0 * self.grid.dx * self.dm.P_max, 1e-3 * self.xi.std)

    def quadrature_tol(self) -> float:
        # midpoint pushforward of the initial law is second order in dx
        return max(1e-8, self.grid.dx**2)

    def default_m0(self) -> MeanFieldCurve:
        t = self.grid.t
        growth = self.dm.P0_at(0.0) / self.dm.P0_at(t)  # exp(int_0^t r)
        return MeanFieldCurve(t, self.xi.mean * growth)


@dataclass
class FixedPointConfig:
    damping: float = 0.5
    tol_fp: float | None = None
    max_iters: int = 200
    epsilon_schedule: tuple = ()
    epsilon_floor: float | None = None
    expectation_engine: str = "density"
    mc_paths: int = 20000
    mc_seed: int = 12345
    kernel_kind: str = "quartic-polynomial"

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise InvalidParameter("damping must lie in (0, 1]")
        if self.expectation_engine not in ("density", "montecarlo"):
            raise InvalidParameter("expectation_engine must be 'density' or 'montecarlo'")
        self.epsilon_schedule = tuple(float(e) for e in self.epsilon_schedule)

    def tolerance(self, problem: Problem) -> float:
        if self.tol_fp is not None:
            return self.tol_fp
        return 1e-4 * (1.0 + problem.bounds(1.0).C4)

    def floor(self, problem: Problem) -> float:
        return problem.epsilon_floor() if self.epsilon_floor is None else self.epsilon_floor

    def schedule(self, problem: Problem, n: int = 4) -> tuple:
        if self.epsilon_schedule:
            return self.epsilon_schedule
        e0 = 0.2 * problem.xi.std
        floor = self.floor(problem)
        sched = [e0 * 2.0**-k for k in range(n) if e0 * 2.0**-k >= floor]
        return tuple(sched) or (max(e0, floor),)


def validate_schedule(cfg: FixedPointConfig, problem: Problem) -> tuple:
    sched = cfg.schedule(problem)
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise InvalidParameter(f"epsilon schedule must be strictly decreasing, got {sched}")
    floor = cfg.floor(problem)
    grid_floor = 2.0 * problem.grid.dx * problem.dm.P_max
    if floor < grid_floor:
        raise DomainTooSmall(
            f"precheck: epsilon floor {floor:.4g} below 2*dx*P_max = {grid_floor:.4g}; "
            "the mollified layer would be under-resolved"
        )
    if min(sched) < floor:
        raise DomainTooSmall(
            f"precheck: schedule reaches {min(sched):.4g} below the epsilon floor {floor:.4g} "
            f"(2*dx*P_max = {grid_floor:.4g})"
        )
    return sched


@dataclass
class PhiEvaluation:
    m_in: MeanFieldCurve
    m_out: MeanFieldCurve
    sol: PdeSolution
    p: np.ndarray | None = None
    se: np.ndarray | None = None


def phi_eps(m: MeanFieldCurve, epsilon: float, problem: Problem, cfg: FixedPointConfig | None = None,
            full: bool = False):
    """Population mean wealth generated when every agent best-responds to ``m``."""
    cfg = cfg or FixedPointConfig()
    kernel = MollifierKernel(cfg.kernel_kind, epsilon)
    P = problem
    sol = solve_regularized_pde(P.dm, P.prefs, m, kernel, P.grid, P.scheme)
    if cfg.expectation_engine == "density":
        p0 = initial_aux_density(sol, P.xi, P.dm)
        de = evolve_density(sol, p0, kernel, P.dm, P.prefs, m)
        out = mean_wealth_from_density(sol, de, P.dm)
        ev = PhiEvaluation(m, out, sol, p=de.p)
    else:
        bundle = simulate_aux_paths(sol, P.xi, kernel, P.dm, P.prefs, m, cfg.mc_paths, cfg.mc_seed,
                                    n_record=None)
        lift_paths(bundle, sol, P.dm, P.prefs, kernel, m)
        out, se = estimate_mean_wealth(bundle)
        ev = PhiEvaluation(m, out, sol, se=se)
    return ev if full else ev.m_out


@dataclass
class FixedPointResult:
    epsilon: float
    m: MeanFieldCurve
    residual: float
    iterations: int
    history: list
    evaluation: PhiEvaluation

    @property
    def sol(self):
        return self.evaluation.sol


def solve_fixed_point(epsilon: float, m0: MeanFieldCurve, problem: Problem,
                      cfg: FixedPointConfig | None = None) -> FixedPointResult:
    """Damped Picard: m <- (1 - a) m + a Phi(m) until ||m - Phi(m)|| <= tol.

    The returned curve is the last iterate whose image was evaluated, so the
    reported residual is exact rather than a bound.
    """
    cfg = cfg or FixedPointConfig()
    tol = cfg.tolerance(problem)
    a = cfg.damping
    m = MeanFieldCurve(problem.grid.t, m0(problem.grid.t))
    history = []
    for j in range(1, cfg.max_iters + 1):
        ev = phi_eps(m, epsilon, problem, cfg, full=True)
        res = m.sup_diff(ev.m_out)
        history.append(res)
        log.debug("eps=%.4g iter %d residual %.3e", epsilon, j, res)
        if res <= tol:
            return FixedPointResult(epsilon, m, res, j, history, ev)
        m = MeanFieldCurve(m.t, (1.0 - a) * m.values + a * ev.m_out.values)
    raise NoConvergence(
        f"fixed point at eps={epsilon:.4g} not reached in {cfg.max_iters} iterations "
        f"(last residual {history[-1]:.3e}, tol {tol:.3e}); lower the damping or raise eps",
        history=history, last=m,
    )


def k_membership(m: MeanFieldCurve, bc: BoundConstants, xi_mean: float, slack: float = 0.1,
                 m0_tol: float = 1e-6) -> dict:
    """Distance of a curve from the invariant set: m(0) = E[xi], |m| <= C4, Lipschitz <= C5.

    ``m0_tol`` is relative to 1 + |E[xi]| and should cover the quadrature
    error of the initial pushforward.
    """
    rep = {
        "m0_error": float(abs(m.values[0] - xi_mean)),
        "sup": float(np.max(np.abs(m.values))),
        "lipschitz": m.lipschitz,
        "C4": bc.C4,
        "C5": bc.C5,
    }
    rep["ok_m0"] = rep["m0_error"] <= m0_tol * (1.0 + abs(xi_mean))
    rep["ok_sup"] = rep["sup"] <= bc.C4 * (1.0 + slack)
    rep["ok_lipschitz"] = rep["lipschitz"] <= bc.C5 * (1.0 + slack)
    rep["ok"] = rep["ok_m0"] and rep["ok_sup"] and rep["ok_lipschitz"]
    return rep


@dataclass
class EpsilonRecord:
    epsilon: float
    m: MeanFieldCurve
    sol: PdeSolution
    boundary: BoundaryCurve
    residual: float
    iterations: int
    history: list
    k_report: dict
    invariants: InvariantReport
    bounds: BoundConstants
    runtime: float = 0.0


@dataclass
class EquilibriumSolution:
    records: list
    continuation_diffs: list
    boundary_diffs: list
    tol_fp: float
    complete: bool = True

    @property
    def final(self) -> EpsilonRecord:
        return self.records[-1]

    @property
    def cauchy_ok(self) -> bool:
        if len(self.continuation_diffs) < 2:
            return True
        return self.continuation_diffs[-1] <= self.continuation_diffs[0]

    @property
    def boundary_cauchy_ok(self) -> bool:
        if len(self.boundary_diffs) < 2:
            return True
        return self.boundary_diffs[-1] <= self.boundary_diffs[0]


def epsilon_continuation(problem: Problem, cfg: FixedPointConfig | None = None,
                         m0: MeanFieldCurve | None = None) -> EquilibriumSolution:
    """Solve the regularized fixed point along a decreasing epsilon schedule.

    Each solve is warm-started from the previous one. On failure the
    exception carries the completed records as ``exc.partial``.
    """
    cfg = cfg or FixedPointConfig()
    sched = validate_schedule(cfg, problem)
    P = problem
    m_prev = m0 or P.default_m0()
    records, diffs, bdiffs = [], [], []
    tol = cfg.tolerance(P)
    for eps in sched:
        t0 = time.perf_counter()
        try:
            fp = solve_fixed_point(eps, m_prev, P, cfg)
        except NoConvergence as exc:
            exc.partial = EquilibriumSolution(records, diffs, bdiffs, tol, complete=False)
            raise
        kernel = MollifierKernel(cfg.kernel_kind, eps)
        bc = P.bounds(fp.sol.ux_max)
        b = separation_boundary(fp.sol, fp.m, P.dm)
        inv = check_solution_invariants(fp.sol, bc, P.dm, P.prefs, kernel, P.scheme)
        rec = EpsilonRecord(
            epsilon=eps, m=fp.m, sol=fp.sol, boundary=b, residual=fp.residual,
            iterations=fp.iterations, history=fp.history,
            k_report=k_membership(fp.m, bc, P.xi.mean, m0_tol=P.quadrature_tol()), invariants=inv, bounds=bc,
            runtime=time.perf_counter() - t0,
        )
        if records:
            diffs.append(rec.m.sup_diff(records[-1].m))
            bdiffs.append(rec.boundary.sup_diff(records[-1].boundary))
        records.append(rec)
        log.info("eps=%.4g converged in %d iterations, residual %.3e", eps, fp.iterations, fp.residual)
        m_prev = fp.m
    return EquilibriumSolution(records, diffs, bdiffs, tol)
