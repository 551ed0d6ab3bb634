"""Exception hierarchy shared by all solver stages."""

from __future__ import annotations


class LatentMFGError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(LatentMFGError):
    pass


class ConvexityViolation(LatentMFGError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(LatentMFGError):
    """Malformed or unknown keys in a model / experiment file."""


class SingularSigma(LatentMFGError):
    pass


class DegenerateFilter(LatentMFGError):
    pass


class BlowUp(LatentMFGError):
    def __init__(self, message: str, escape_time: float):
        super().__init__(message)
        self.escape_time = escape_time


class GridMismatch(LatentMFGError):
    pass


class NoConvergence(LatentMFGError):
    def __init__(self, message: str, residual: float, gains=None):
        super().__init__(message)
        self.residual = residual
        self.gains = gains


class DivergenceDetected(NoConvergence):
    pass


class RankDeficientRegression(LatentMFGError):
    pass


class PathBudgetTooSmall(LatentMFGError):
    pass


class OffGrid(LatentMFGError):
    pass


class UnstableTrajectory(LatentMFGError):
    def __init__(self, message: str, path_id: int):
        super().__init__(message)
        self.path_id = path_id


class BudgetExhausted(UserWarning):
    """The deviation search used its whole evaluation budget before converging.

    Issued as a warning: the best deviation found so far is still returned.
    """
