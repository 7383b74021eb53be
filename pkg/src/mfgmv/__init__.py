"""Open-loop mean-field equilibria for the mean-variance game with peer-based
piecewise risk aversion: mollify, solve the regularized PDE, lift to paths,
and iterate the mean-field fixed point under epsilon-continuation.
"""

from .fixedpoint import (EquilibriumSolution, FixedPointConfig, Problem, epsilon_continuation, phi_eps,
                         solve_fixed_point)
from .model import (InitialDistribution, MarketModel, MeanFieldCurve, Preferences, bound_constants,
                    derive_market)
from .mollify import MollifierKernel
from .pde import SchemeOptions, SpaceTimeGrid, make_grid, solve_regularized_pde

__version__ = "0.1.0"

__all__ = [
    "EquilibriumSolution", "FixedPointConfig", "Problem", "epsilon_continuation", "phi_eps",
    "solve_fixed_point", "InitialDistribution", "MarketModel", "MeanFieldCurve", "Preferences",
    "bound_constants", "derive_market", "MollifierKernel", "SchemeOptions", "SpaceTimeGrid", "make_grid",
    "solve_regularized_pde",
]
