"""Exception types raised by the estimators and the experiment tooling."""

import numpy as np


class SingularSystemError(np.linalg.LinAlgError):
    """A regularized normal-equation system has no unique solution.

    ``directions`` holds the (approximate) null directions of the system
    matrix as columns, so callers can see which parts of parameter space
    were left unconstrained.
    """

    def __init__(self, message, directions=None):
        super().__init__(message)
        self.directions = directions


class RankDeficientError(np.linalg.LinAlgError):
    """The pooled design does not determine the parameter uniquely."""


class InfeasibleError(ValueError):
    """An interpolation constraint ``X w = y`` has no solution."""


class UnstableScheduleError(ValueError):
    """A gradient-descent schedule would diverge on the given task."""


class ConfigError(ValueError):
    """An experiment configuration could not be parsed or validated."""
