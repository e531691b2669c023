"""Exception hierarchy shared across the package."""


class LmsmError(Exception):
    """Base class for all package errors."""


class SchemaError(LmsmError):
    """A schema or config names a missing column or an unknown key."""


class DataParseError(LmsmError):
    """A data file holds a value that cannot be coerced to its declared type."""


class ContractError(LmsmError, ValueError):
    """An argument violates a documented precondition (shape, range, ...)."""


class SolverError(LmsmError):
    """Newton iterations failed: singular Jacobian or no convergence."""

    def __init__(self, message, residual=None, condition=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.condition = condition
        self.trace = trace or []


class InferenceError(LmsmError):
    """The influence-function covariance could not be formed."""


class OracleError(LmsmError):
    """An exact enumeration oracle was asked for a state space beyond its cap."""
