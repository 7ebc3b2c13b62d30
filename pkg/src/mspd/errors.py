"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class MSPDError(Exception):
    """Base class for package errors."""


class NumericError(MSPDError):
    """A numerical procedure failed (maps to CLI exit code 2)."""


class NonIntegrable(NumericError):
    """A mark functional could not be integrated against its law."""


class NoConvergence(NumericError):
    """An iterative solver hit its iteration cap."""


class GridMismatch(NumericError, ValueError):
    """Two grid functions do not share the same grid."""


class ExplosionGuard(NumericError):
    """Simulation produced more events than the configured cap."""


class TooLarge(MSPDError, ValueError):
    """An enumeration oracle was asked for more points than its cap."""


class ValidationError(MSPDError, ValueError):
    """A specification or configuration is invalid (CLI exit code 1)."""


class NotSubcritical(ValidationError):
    """The branching matrix has spectral radius >= 1."""

    def __init__(self, radius: float, message: str | None = None):
        self.radius = float(radius)
        super().__init__(message or f"excitation is not subcritical: spectral radius {self.radius:.6g} >= 1")


class NotSeparable(ValidationError):
    """An operation requiring separable kernels received something else."""


class ParseError(ValidationError):
    """A configuration file could not be parsed; carries the offending line."""

    def __init__(self, line: int | None, message: str):
        self.line = line
        self.message = message
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
