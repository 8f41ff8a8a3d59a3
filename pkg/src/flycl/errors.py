"""Exception types raised across the package."""


class FlyError(Exception):
    """Base class for all errors raised by flycl."""


class ShapeError(FlyError, ValueError):
    """An array or dimension does not match what the stage expects."""


class ConfigError(FlyError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class DataError(FlyError, ValueError):
    """Data is empty, insufficient, or otherwise unusable."""


class FormatError(FlyError, ValueError):
    """A binary container failed to parse.

    ``offset`` is the byte position at which parsing stopped, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingDataError(FlyError, LookupError):
    """A ledger cell, snapshot or baseline needed for a metric is absent."""


class UndefinedError(FlyError, ValueError):
    """A quantity is mathematically undefined for the given input."""


class NotApplicableError(FlyError, ValueError):
    """An operation does not apply to this model configuration."""


class InvalidTraceError(ShapeError):
    """A forward trace was not produced by this model (stale or foreign)."""


class InvalidLabelError(FlyError, ValueError):
    """A class label lies outside the valid or unmasked range."""
