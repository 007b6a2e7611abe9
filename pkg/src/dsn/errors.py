"""Exception types shared across the package."""


class DsnError(Exception):
    """Base class for all package errors."""


class ShapeError(DsnError):
    """Operand shapes are incompatible."""


class ConfigError(DsnError):
    """Invalid configuration value."""


class DataError(DsnError):
    """Malformed or out-of-range input data."""


class FormatError(DsnError):
    """Corrupt or mismatched file format."""


class NumericError(DsnError):
    """Non-finite value or failed numeric check."""
