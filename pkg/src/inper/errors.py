class InPerError(Exception):
    """Base class for errors raised by this package."""


class InvalidShapeError(InPerError, ValueError):
    pass


class InvalidProbabilityError(InPerError, ValueError):
    pass


class InvalidParameterError(InPerError, ValueError):
    pass


class InvalidConfigurationError(InPerError, ValueError):
    pass


class InvalidLabelError(InPerError, ValueError):
    pass


class ZeroNormError(InPerError, ValueError):
    pass


class UsageError(InPerError, RuntimeError):
    pass


class FormatError(InPerError, ValueError):
    pass


class NotFoundError(InPerError, KeyError):
    pass
