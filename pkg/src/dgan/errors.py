"""Exception hierarchy shared across the package."""


class DGANError(Exception):
    """Base class for all package errors."""


class InsufficientHistory(DGANError):
    pass


class InvalidState(DGANError, ValueError):
    pass


class ShapeError(DGANError, ValueError):
    pass


class NonFiniteError(DGANError, FloatingPointError):
    """Raised when an operation produces NaN or Inf; the message names the op."""


class TapeError(DGANError, RuntimeError):
    pass


class NotFound(DGANError, KeyError):
    pass


class MissingFeature(DGANError, KeyError):
    pass


class InsufficientData(DGANError, ValueError):
    pass


class ParseError(DGANError, ValueError):
    pass


class DuplicateObservation(ParseError):
    pass


class ConfigError(DGANError, ValueError):
    pass
