"""Exception types shared across the package."""

from __future__ import annotations

import numpy as np


class StraightflowError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(StraightflowError, ValueError):
    """An argument violates an operation precondition."""


class InvalidCouplingError(StraightflowError, ValueError):
    """A coupling specification is internally inconsistent."""


class DegenerateMarginalError(StraightflowError):
    """The marginal covariance at the requested time is numerically singular."""


class DegenerateDataError(StraightflowError):
    """A data slice has no usable spread (e.g. zero variance)."""


class NonFiniteDataError(StraightflowError):
    """Input arrays contain NaN or infinite entries where finite values are required."""


class LowDensityError(StraightflowError):
    """Too little effective sample mass near the query point.

    Carries the offending effective sample size so callers can report or mask.
    """

    def __init__(self, message: str, effective_n: float = 0.0):
        super().__init__(message)
        self.effective_n = effective_n


class InconsistentMomentsError(StraightflowError):
    """Second-moment matrix minus outer product of the mean is not PSD beyond noise tolerance."""


class InvalidGridError(StraightflowError, ValueError):
    """A spatial grid violates its contract (too few nodes, non-uniform spacing...)."""


class TrajectoryLeftSupportError(StraightflowError):
    """ODE integration left the region where the velocity oracle is defined.

    The partial trajectory computed so far is attached as ``times``/``states``.
    """

    def __init__(self, message: str, times: np.ndarray, states: np.ndarray):
        super().__init__(message)
        self.times = times
        self.states = states


class CapabilityError(StraightflowError):
    """The requested computation needs structure the inputs do not have
    (e.g. an analytic oracle for a non-Gaussian coupling)."""


class ConfigError(StraightflowError, ValueError):
    """A CLI configuration file failed validation. ``field`` names the offending entry."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field
