"""Exception types raised across the package."""


class FlockctlError(Exception):
    """Base class for all package errors."""


class InputError(FlockctlError, ValueError):
    """Invalid argument: wrong shape, non-finite value or out-of-range parameter."""


class NumericalBlowupError(FlockctlError, FloatingPointError):
    """A time integration produced non-finite values."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class CareConvergenceError(FlockctlError):
    """Newton-Kleinman iteration did not reach the residual tolerance."""

    def __init__(self, message, residual=float("nan"), time=None):
        super().__init__(message)
        self.residual = residual
        self.time = time


class TrainingDivergenceError(FlockctlError):
    """The training loss became non-finite."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
