"""Exception and warning types shared across the package."""


class VarFsvError(Exception):
    """Base class for all package errors."""


class NumericalError(VarFsvError):
    """Fatal numerical failure (CLI exit code 4)."""


class NotPositiveDefiniteError(NumericalError):
    """A matrix required to be positive definite has a non-positive pivot."""


class DimensionMismatchError(VarFsvError):
    pass


class NonStationaryError(NumericalError):
    """An AR coefficient left the stationary region (|phi| >= 1)."""


class TruncationFailureError(NumericalError):
    """Sampling from a truncated normal failed; the orthant probability is
    reported when an estimate is available."""

    def __init__(self, msg, orthant_prob=None):
        super().__init__(msg)
        self.orthant_prob = orthant_prob


class MaxIterationsExceededError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    """Importance weights collapsed (effective sample size below 2)."""


class InsufficientDrawsError(VarFsvError):
    pass


class NonPositiveScaleError(VarFsvError):
    pass


class NonInvertibleMeanError(NumericalError):
    """(I - A_1 - ... - A_p) is singular; the unconditional mean is undefined."""


class MaxResimulationsError(VarFsvError):
    pass


class ConfigError(VarFsvError):
    """Invalid configuration (CLI exit code 2)."""


class DataError(VarFsvError):
    """Invalid input data (CLI exit code 3)."""


class ParseError(DataError):
    pass


class MissingValueError(DataError):
    def __init__(self, msg, row=None, col=None):
        super().__init__(msg)
        self.row = row
        self.col = col


class NonStationaryWarning(UserWarning):
    """Companion spectral radius at or above one; moving-average sums may diverge."""
