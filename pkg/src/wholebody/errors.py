"""Exception hierarchy shared across the toolkit."""


class WholebodyError(Exception):
    """Base class for every error raised by this package."""


class InputError(WholebodyError, ValueError):
    """Bad input data; the CLI maps these to exit code 2."""


class DimensionError(InputError):
    pass


class NormalizationError(InputError):
    pass


class EmptyAggregationError(InputError):
    pass


class FormatError(InputError):
    pass


class EmptyThresholdSetError(InputError):
    pass


class EmptyMatedSetError(InputError):
    pass


class PartitionError(InputError):
    pass


class RangeClassViolation(InputError):
    pass


class DegenerateActivationError(InputError):
    pass


class MissingScoreError(InputError):
    pass


class RankingDegenerateError(InputError):
    pass


class InsufficientDataError(InputError):
    pass


class ProtocolError(InputError):
    pass


class StreamOrderError(InputError):
    pass


class ConfigError(InputError):
    pass
