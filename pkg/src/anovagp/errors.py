"""Exception types shared across the package."""


class AnovaGPError(Exception):
    """Base class for all package errors."""


class ConfigError(AnovaGPError, ValueError):
    """Invalid configuration: kernel parameters, term sets, or run options."""


class UnknownTermError(ConfigError):
    """A term was requested that is not part of the fitted model."""


class ShapeError(AnovaGPError, ValueError):
    """Array arguments have incompatible shapes or sizes."""


class SizeError(AnovaGPError, ValueError):
    """Problem too large for a dense code path."""


class NumericError(AnovaGPError, ArithmeticError):
    """A computation produced non-finite or otherwise invalid numbers."""


class NotPSDError(NumericError):
    """A matrix expected to be positive semi-definite is not."""


class CentringError(NumericError):
    """A matrix expected to be empirically centred is not."""


class DataError(AnovaGPError, ValueError):
    """Malformed or inconsistent input data (ingestion, adjustment, imputation)."""
