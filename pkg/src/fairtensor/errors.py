"""Exception types shared across the package."""


class FairtensorError(Exception):
    """Base class for package-specific errors."""


class ParseError(FairtensorError, ValueError):
    """A data file row could not be parsed.

    Carries the 1-based line number of the offending row when known.
    """

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(FairtensorError, ValueError):
    """An input dataset contains no usable records."""


class SplitError(FairtensorError, ValueError):
    """A dataset cannot be partitioned as requested."""


class ConfigError(FairtensorError, ValueError):
    """A configuration value is invalid or inconsistent with the data."""


class UndefinedMetricError(FairtensorError, ValueError):
    """A metric has no defined value for the given inputs."""
