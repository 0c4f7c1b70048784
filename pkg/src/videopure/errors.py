"""Exception types shared across the package.

Every error raised on a validated code path derives from VideoPureError so
callers can catch one base class at the CLI boundary.
"""


class VideoPureError(Exception):
    """Base class for all package errors."""


class ShapeError(VideoPureError):
    """A tensor had the wrong shape, dtype, or layout."""


class ScheduleError(VideoPureError):
    """Invalid noise-schedule construction or timestep lookup."""


class ContainerFormatError(VideoPureError):
    """Malformed tensor container file (bad magic, header, or record table)."""


class CheckpointError(VideoPureError):
    """Model checkpoint does not match the architecture it is loaded into."""


class ConfigError(VideoPureError):
    """Invalid configuration value."""


class NumericError(VideoPureError):
    """A non-finite value appeared where the contract requires finite math."""


class AttackError(VideoPureError):
    """Attack loop failed; carries the iteration index where it happened."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


def require(cond: bool, exc_type: type, message: str) -> None:
    """Raise exc_type(message) unless cond holds."""
    if not cond:
        raise exc_type(message)
