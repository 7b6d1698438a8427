"""Exception types shared across the toolkit."""


class NowcastError(Exception):
    """Base class for all toolkit errors."""


class ParseError(NowcastError):
    """A file or payload could not be parsed.

    Carries the offending line number when parsing CSV input.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConflictError(NowcastError):
    """Duplicate key on ingestion."""


class ValidationError(NowcastError):
    """Input violates an invariant (e.g. issue date before reference date)."""


class FetchError(NowcastError):
    """HTTP/transport failure while fetching remote data; retryable."""


class InsufficientDataError(NowcastError):
    """Not enough data to carry out an estimation step."""


class DegenerateDistributionError(NowcastError):
    """An empirical distribution has zero variance; gamma fit undefined."""


class UnfittableSensorError(NowcastError):
    """A sensor regression cannot be fit at this (location, time)."""
