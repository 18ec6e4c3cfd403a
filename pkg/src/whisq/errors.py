"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes, so new failure categories
should subclass one of the existing types rather than add siblings.
"""


class WhisqError(Exception):
    """Base class for all package errors."""


class ConfigError(WhisqError):
    """Invalid or inconsistent configuration."""


class DataError(WhisqError):
    """Malformed input data: files, manifests, batches."""


class MetricError(DataError):
    """Degenerate metric input (zero variance, all ties)."""


class NumericError(WhisqError):
    """NaN/Inf produced, or a numeric contract violated."""
