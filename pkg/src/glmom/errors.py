"""Exception hierarchy shared by every module."""

from __future__ import annotations


class GLMomError(Exception):
    """Base class for all package errors."""


class DomainError(GLMomError, ValueError):
    """An argument lies outside the domain of the operation."""


class OrderConditionError(DomainError):
    """Fewer moment conditions than parameters."""


class NumericalError(GLMomError, ArithmeticError):
    """A computation produced non-finite or unusable values."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceError(NumericalError):
    """An iterative routine stopped before meeting its tolerance.

    ``best`` carries the best iterate found, when there is one.
    """

    def __init__(self, message: str, best=None, diagnostics: dict | None = None):
        super().__init__(message, diagnostics)
        self.best = best
