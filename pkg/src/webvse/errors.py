"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class WebVSEError(Exception):
    exit_code = 1


class ShapeError(WebVSEError, ValueError):
    exit_code = 3


class EmptyInputError(WebVSEError, ValueError):
    exit_code = 3


class DegenerateInputError(WebVSEError, ValueError):
    """Raised when a zero-norm vector reaches a cosine similarity."""

    exit_code = 5


class NumericError(WebVSEError, ArithmeticError):
    exit_code = 5


class NumericInstabilityError(NumericError):
    pass


class FormatError(WebVSEError, ValueError):
    exit_code = 4


class ValidationError(WebVSEError, ValueError):
    exit_code = 3


class ConfigError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class IntegrityError(WebVSEError):
    exit_code = 6
