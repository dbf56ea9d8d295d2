"""Exception hierarchy shared across the package."""


class FHRDError(Exception):
    """Base class for all package errors."""


class DomainError(FHRDError, ValueError):
    """An argument lies outside the domain of a function."""


class DataValidationError(FHRDError, ValueError):
    """Input data failed validation (bad file, bad values, mismatched ids)."""


class NumericalError(FHRDError, ArithmeticError):
    """A numerical procedure failed to produce a usable answer."""


class SingularDesignError(NumericalError):
    """Design matrix (possibly weighted) is rank deficient."""


class NoRootError(NumericalError):
    """A bracketed root search found no sign change."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its iteration budget."""


class QuadratureError(NumericalError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BootstrapError(NumericalError):
    """Too many bootstrap replicates failed to re-fit."""
