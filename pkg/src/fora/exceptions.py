"""Exception types raised across the package."""

from __future__ import annotations


class ForaError(Exception):
    """Base class for all package errors."""


class ShapeError(ForaError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankDeficientError(ForaError, ValueError):
    """A factorization met a numerically dependent column."""

    def __init__(self, message: str, column: int):
        super().__init__(message)
        self.column = column


class NumericalError(ForaError, ArithmeticError):
    """Non-finite values or a diverging iteration."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConfigError(ForaError, ValueError):
    """Invalid configuration or hyperparameter value."""


class NotFittedError(ForaError, AttributeError):
    """An estimator was used before ``fit``."""
