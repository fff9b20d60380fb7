"""Exception hierarchy for evospde."""


class SPDEError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(SPDEError, ValueError):
    """An argument lies outside the admissible range of an operation."""


class EllipticityError(SPDEError, ValueError):
    pass


class ShiftError(SPDEError, ValueError):
    """The spectrum is not strictly to the left of the requested shift."""


class IllConditionedError(SPDEError, ArithmeticError):
    pass


class SingularResolventError(SPDEError, ArithmeticError):
    pass


class SingularStepError(SPDEError, ArithmeticError):
    pass


class OrderingError(SPDEError, ValueError):
    pass


class ContractViolationError(SPDEError, ValueError):
    pass


class DivergenceError(SPDEError, RuntimeError):
    """The Picard iteration failed to contract even after weight escalation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LocalizationError(SPDEError, RuntimeError):
    pass


class ConfigError(SPDEError, ValueError):
    pass
