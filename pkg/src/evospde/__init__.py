"""Stochastic evolution equations with time-dependent elliptic operators on (0, 1).

Finite-difference discretisation of du = (A(t)u + F(t,u)) dt + B(t,u) dW_H
with Neumann boundary conditions, Q-Wiener noise in a cosine basis, mild
solutions by Picard iteration, and numerical checks of the underlying
operator inequalities.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractViolationError, DivergenceError, DomainError,  # noqa: E402
                     EllipticityError, IllConditionedError, LocalizationError, OrderingError,
                     ShiftError, SingularResolventError, SingularStepError, SPDEError)
from .mesh import Field, Path, SpaceGrid, TimeGrid, lp_norm  # noqa: E402

__all__ = [
    "__version__", "Field", "Path", "SpaceGrid", "TimeGrid", "lp_norm",
    "SPDEError", "DomainError", "EllipticityError", "ShiftError", "IllConditionedError",
    "SingularResolventError", "SingularStepError", "OrderingError", "ContractViolationError",
    "DivergenceError", "LocalizationError", "ConfigError",
]
