"""Exception hierarchy shared across the package."""


class CuboidFitError(Exception):
    """Base class for all cuboidfit errors."""


class InvalidInputError(CuboidFitError, ValueError):
    """A function received values outside its contract (non-finite, empty, ...)."""


class InvalidConfigError(CuboidFitError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DataError(CuboidFitError):
    """A file could not be parsed or fails validation."""


class NumericalError(CuboidFitError):
    """Optimization or gradient computation produced non-finite values."""

    def __init__(self, message, last_state=None, step=None):
        super().__init__(message)
        self.last_state = last_state
        self.step = step
