"""Exception types shared across the package."""


class InvalidRecordError(ValueError):
    """A preference record violates its invariants."""


class RecordParseError(ValueError):
    """A JSONL line could not be parsed into a record."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MissingScoreError(ValueError):
    """Score-derived labels requested for a record without scores."""


class UnsupportedFormError(ValueError):
    """An operation was given a record or class-probability form it does not handle."""


class ConfigError(ValueError):
    """Invalid configuration or incompatible data for a configuration."""


class NumericalFailure(FloatingPointError):
    """Non-finite loss or gradient during training.

    ``report`` holds whatever was logged before the failure.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
