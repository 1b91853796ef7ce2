"""Exception hierarchy shared by all pipeline stages."""


class JointSeizeError(Exception):
    """Base class for every error raised by this package."""


class ParseError(JointSeizeError):
    """A record in an input file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class OrderingError(JointSeizeError):
    """Frame indices are duplicated or not increasing."""


class SchemaError(JointSeizeError):
    """A record parsed but does not match the expected layout."""


class ValidationError(JointSeizeError, ValueError):
    """A value violates a domain invariant."""


class ConfigurationError(JointSeizeError, ValueError):
    """Invalid configuration or hyperparameters."""


class DataError(JointSeizeError):
    """Input data is missing or inconsistent with the request."""


class ShapeError(JointSeizeError, ValueError):
    """Array dimensions do not match what an operation expects."""


class LeakageError(DataError):
    """A subject appears in more than one of train/validation/test."""


class TrainingError(JointSeizeError):
    """Training diverged or could not proceed."""
