"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericalFailure(ArithmeticError):
    """Raised when a computation produces non-finite values."""


class FormatError(ValueError):
    """Raised for malformed files (datasets, checkpoints, configs)."""


class ConfigurationError(ValueError):
    """Raised for physically or structurally inconsistent configurations."""
