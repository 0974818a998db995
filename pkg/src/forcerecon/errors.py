"""Exception types raised across the package."""


class ForceReconError(Exception):
    """Base class for all package errors."""


class GridMismatchError(ForceReconError, ValueError):
    pass


class SupportError(ForceReconError, ValueError):
    """A field has nonzero coefficients outside the band it is required to live in."""


class BlowUpError(ForceReconError, ArithmeticError):
    def __init__(self, t, reason):
        super().__init__(f"integration blew up at t={t:.6g}: {reason}")
        self.t = t
        self.reason = reason


class ObservationGapError(ForceReconError, IndexError):
    pass


class ConvergenceError(ForceReconError, RuntimeError):
    pass


class InfeasibleParametersError(ForceReconError, ValueError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(ForceReconError, ValueError):
    pass
