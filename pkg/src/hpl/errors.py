"""Exception types shared across the package."""


class HplError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(HplError, ValueError):
    """A configuration violates one of its invariants."""


class UsageError(HplError, ValueError):
    """An operation was called with arguments outside its contract."""


class CapabilityError(HplError):
    """The requested computation is too large to enumerate exactly."""


class ValidationError(HplError, ValueError):
    """A segmenter response broke the partition rules.

    The offending raw response is kept on ``raw`` for logging.
    """

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class TransportError(HplError):
    """The external segmenter could not be reached."""
