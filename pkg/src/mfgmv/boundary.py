"""Separation boundary b(t): the point where u(t, b(t)) = P0(t) m(t)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainTooSmall, OutOfRange
from .model import DerivedMarket, MeanFieldCurve
from .pde import PdeSolution, invert_u


@dataclass(frozen=True)
class BoundaryCurve:
    t: np.ndarray
    b: np.ndarray
    target: np.ndarray
    residuals: np.ndarray

    @property
    def K_b(self):
        """Largest finite-difference slope; the observed modulus of continuity."""
        return float(np.max(np.abs(np.diff(self.b)) / np.diff(self.t)))

    def sup_diff(self, other: "BoundaryCurve") -> float:
        return float(np.max(np.abs(self.b - np.interp(self.t, other.t, other.b))))


def separation_boundary(sol: PdeSolution, m: MeanFieldCurve, dm: DerivedMarket,
                        bracket_shift: float = 0.0) -> BoundaryCurve:
    """Root of u(t, .) = P0(t) m(t) at every time node.

    ``bracket_shift`` moves the initial bisection bracket inward on both sides;
    the root must not depend on it.
    """
    g = sol.grid
    t = g.t
    R = dm.P0_at(t) * m(t)
    b = np.empty_like(t)
    res = np.empty_like(t)
    for i, ti in enumerate(t):
        tol = 1e-12 * (1.0 + abs(R[i]))
        bracket = (g.x_lo + bracket_shift, g.x_hi - bracket_shift) if bracket_shift else None
        try:
            b[i] = invert_u(sol, ti, R[i], bracket=bracket, tol=tol)
        except OutOfRange as exc:
            raise DomainTooSmall(f"separation boundary leaves the grid at t={ti:.6g}: {exc}") from exc
        res[i] = abs(np.interp(b[i], g.x, sol.u[i]) - R[i])
    return BoundaryCurve(t=t, b=b, target=R, residuals=res)
