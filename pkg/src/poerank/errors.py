"""Exception types shared across the package."""

from __future__ import annotations


class PoeRankError(Exception):
    """Base class for all errors raised by poerank."""


class InvalidInputError(PoeRankError, ValueError):
    """An argument is outside its valid domain."""


class ConvergenceError(PoeRankError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    The last iterate and its gradient norm are kept so callers can inspect
    or resume from them.
    """

    def __init__(self, message, iterate=None, grad_norm=float("nan"), step=None):
        super().__init__(message)
        self.iterate = iterate
        self.grad_norm = grad_norm
        self.step = step


class SingularityError(PoeRankError, RuntimeError):
    """A matrix that must be positive definite could not be factorised."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyPoolError(PoeRankError):
    """No candidate pairs are left to select from."""


class UndefinedMetricError(PoeRankError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class LogParseError(PoeRankError, ValueError):
    """A log line could not be parsed or failed validation."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path
