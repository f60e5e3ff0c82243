"""Exception and warning types shared across the package."""


class SplitRecError(Exception):
    """Base class for all package errors."""


class ShapeError(SplitRecError, ValueError):
    """Raised when array dimensions do not line up."""

    def __init__(self, what: str, expected, got):
        self.what = what
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected {expected}, got {got}")


class ConfigError(SplitRecError, ValueError):
    """Invalid run or federation configuration."""


class DataError(SplitRecError, ValueError):
    """Malformed or insufficient input data."""


class LabelError(SplitRecError, ValueError):
    """A batch has no positive label, so the loss carries no signal."""


class NonFiniteGradient(SplitRecError, FloatingPointError):
    """An aggregated gradient contained NaN or Inf; the round is rejected."""


class RoundAborted(SplitRecError, RuntimeError):
    """A federation round failed part way and left global state untouched."""

    def __init__(self, round_index: int, reason: str):
        self.round_index = round_index
        self.reason = reason
        super().__init__(f"round {round_index} aborted: {reason}")


class PrivacyWarning(UserWarning):
    """Secure aggregation cannot hide anything in the current setting."""


class PrivacyViolation(SplitRecError, AssertionError):
    """Traffic inspection found private data in a client message."""
