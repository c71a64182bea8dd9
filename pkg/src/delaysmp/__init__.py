"""Windowed backward SDEs, anticipated BSDEs, and delayed maximum principles."""

from .grids import TimeGrid
from .measures import RegularMeasure
from .drivers import BinaryLattice, MonteCarloDriver, girsanov_weights
from .bsde import AdaptedPair, LinearBsdeProblem, solve_explicit, solve_recursion
from .absde import AbsdeProblem, direct_solve, picard_solve
from .sdde import ControlPath, DelayedCoefficient, TerminalCost, simulate_state
from .smp import ControlProblem, build_adjoint, duality_check, optimality_residual
from .models import AdvertisingModel, PortfolioModel

__version__ = "0.1.0"

__all__ = [
    "TimeGrid",
    "RegularMeasure",
    "BinaryLattice",
    "MonteCarloDriver",
    "girsanov_weights",
    "AdaptedPair",
    "LinearBsdeProblem",
    "solve_explicit",
    "solve_recursion",
    "AbsdeProblem",
    "direct_solve",
    "picard_solve",
    "ControlPath",
    "DelayedCoefficient",
    "TerminalCost",
    "simulate_state",
    "ControlProblem",
    "build_adjoint",
    "duality_check",
    "optimality_residual",
    "AdvertisingModel",
    "PortfolioModel",
    "__version__",
]
