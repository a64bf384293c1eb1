"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid."""


class DataFormatError(Exception):
    """A file does not conform to its declared on-disk format."""


class InsufficientDataError(ValueError):
    """An operation received fewer data points than its contract requires."""


class DegenerateModelError(RuntimeError):
    """A fitted model is degenerate and refuses to produce posteriors."""


class UndefinedOracleError(ValueError):
    """Oracle statistics are undefined (one side of the true split is empty)."""


class TrainingAborted(RuntimeError):
    """Training hit a non-finite value and cannot continue."""
