"""Exception types shared across the package."""


class DiffusionLabError(Exception):
    """Base class for all package errors."""


class DomainError(DiffusionLabError, ValueError):
    """A time or state lies outside the region where a quantity is defined."""


class ArgumentError(DiffusionLabError, ValueError):
    """Arguments are inconsistent with each other (ordering, shapes, counts)."""


class UnsupportedKindError(DiffusionLabError, ValueError):
    """The requested operation does not apply to this schedule kind or dimension."""


class SingularDensityError(DiffusionLabError, ValueError):
    """Every mixture component is a point mass at this time."""


class InvariantViolation(DiffusionLabError, AssertionError):
    """An internal consistency check failed; indicates a bug, not bad input."""


class DivergenceError(DiffusionLabError, FloatingPointError):
    """A sampler or optimizer produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, index: int | None = None):
        super().__init__(message)
        self.step = step
        self.index = index


class UsageError(DiffusionLabError, RuntimeError):
    """An object was used outside its protocol (e.g. a tape consumed twice)."""


class FormatError(DiffusionLabError, ValueError):
    """A checkpoint or artifact file is corrupt or does not match expectations."""


class ConfigError(DiffusionLabError, ValueError):
    """An experiment config could not be parsed or validated."""
