"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SpuroodError`,
so callers (the CLI in particular) can separate domain failures from bugs.
"""


class SpuroodError(Exception):
    """Base class for all package errors."""


# numerics
class ShapeMismatchError(SpuroodError, ValueError):
    pass


DimensionMismatchError = ShapeMismatchError


class RankDeficientError(SpuroodError, ValueError):
    pass


class NotSpdError(SpuroodError, ValueError):
    pass


class EmptyInputError(SpuroodError, ValueError):
    pass


class NonPositiveVarianceError(SpuroodError, ValueError):
    pass


# gauss_world
class BadEnvIndexError(SpuroodError, IndexError):
    pass


class TooManyEnvsError(SpuroodError, ValueError):
    pass


class BadConfidenceError(SpuroodError, ValueError):
    pass


# data
class DataError(SpuroodError):
    """Problems with input files or dataset contents (CLI exit code 2)."""


class BadMagicError(DataError, ValueError):
    pass


class TruncatedError(DataError, ValueError):
    pass


class DimMismatchError(DataError, ValueError):
    pass


class EmptyClassError(DataError, ValueError):
    pass


# training
class EmptyBatchError(SpuroodError, ValueError):
    pass


class EmptyEnvironmentError(SpuroodError, ValueError):
    pass


# scores / metrics
class NonPositiveTemperatureError(SpuroodError, ValueError):
    pass


class ClassTooSmallError(SpuroodError, ValueError):
    pass


class NotFittedError(SpuroodError, RuntimeError):
    pass


class EmptySplitError(SpuroodError, ValueError):
    pass


class EmptyScoresError(SpuroodError, ValueError):
    pass


# config
class ConfigError(SpuroodError, ValueError):
    """Malformed experiment configuration (CLI exit code 1)."""


class UnknownKeyError(ConfigError):
    pass


class BadValueError(ConfigError):
    pass


class MissingRequiredError(ConfigError):
    pass
