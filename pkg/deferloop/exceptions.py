"""
Error types raised by deferloop.
"""

from typing import Optional


class DeferloopError(Exception):
    """Base class for all deferloop errors."""


class ConfigError(DeferloopError, ValueError):
    """Invalid configuration, parameters, or dataset contents."""


class ParseError(ConfigError):
    """
    Malformed input file.

    Args:
        message: Description of the problem
        line: 1-based line number in the offending file, if known
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(DeferloopError, ValueError):
    """Array dimensions do not match what an operation expects."""


class DegenerateWeights(DeferloopError, ValueError):
    """A weight vector cannot be normalized (all zero)."""


class NumericError(DeferloopError, ArithmeticError):
    """Non-finite values appeared in gradients or parameters."""


class LabelAccessError(DeferloopError, AttributeError):
    """Training code tried to read a ground-truth label it must not see."""
