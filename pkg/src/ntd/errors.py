"""Exception types shared across the package."""


class NtdError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(NtdError):
    """An input or invariant check failed (bad shapes, NaN values, bad config)."""


class FormatError(NtdError):
    """A serialized artifact could not be parsed (bad magic, version, truncation)."""


class IoError(NtdError):
    """An underlying read or write failed (missing file, permissions, disk)."""


class DegenerateMetricError(NtdError):
    """A similarity kernel hit an undefined case (zero norm, zero variance,
    near-zero denominator)."""


class UnknownClassError(NtdError):
    """A class id was requested that the store or table does not contain."""


class InsufficientRecordsError(NtdError):
    """A class does not have enough records for the requested operation."""


class MetricMismatchError(NtdError):
    """Detection was asked to run with a metric different from the one the
    threshold table was calibrated for."""


class InfeasibleGeometryError(NtdError):
    """The synthetic generator cannot place class means at the requested
    minimum angular separation."""
