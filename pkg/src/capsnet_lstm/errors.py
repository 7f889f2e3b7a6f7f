"""Exception hierarchy shared across the package."""


class CapsError(Exception):
    """Base class for all package errors."""


class DimensionError(CapsError, ValueError):
    """Tensor extents disagree with what an operation requires."""


class ArgumentError(CapsError, ValueError):
    """A scalar argument is out of its valid range."""


class NumericError(CapsError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(CapsError, ValueError):
    pass


class WeightsFormatError(CapsError):
    pass


class DatasetError(CapsError):
    """Dataset layout or metadata problem."""


class DataError(CapsError):
    """A frame file could not be decoded."""


class ValidationError(CapsError, ValueError):
    pass


class ImageFormatError(DataError):
    pass
