"""Exception classes shared across the package."""


class AdamKmlError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(AdamKmlError, ValueError):
    pass


class InvalidArgumentError(AdamKmlError, ValueError):
    pass


class NumericError(AdamKmlError, ArithmeticError):
    """Non-finite values, divergence, or a matrix that should be PSD but is not."""


class UnknownParameterError(AdamKmlError, KeyError):
    pass


class SingularityError(NumericError):
    """A division by a parameter value that is exactly zero."""


class FormatError(AdamKmlError, ValueError):
    """A file does not follow its on-disk format."""


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(AdamKmlError, ValueError):
    pass
