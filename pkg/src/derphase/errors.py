"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class DerphaseError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(DerphaseError, ValueError):
    """Input data violates a structural or physical invariant."""


class ParseError(ValidationError):
    """A file could not be parsed in its declared format."""


class NumericFailure(DerphaseError, ArithmeticError):
    """A numerical procedure produced an unusable state.

    ``node`` and ``step`` locate the failure when known.
    """

    def __init__(self, message: str, node: str | None = None, step: int | None = None) -> None:
        super().__init__(message)
        self.node = node
        self.step = step


class InconsistentSolveError(NumericFailure):
    """Cost bookkeeping found a power-flow result that cannot be right."""
