"""Exception hierarchy.

Every error raised on purpose by the package derives from ``OctsnError`` and
carries the exit code the CLI maps it to.
"""


class OctsnError(Exception):
    exit_code = 2


class ConfigError(OctsnError, ValueError):
    """Invalid configuration, preset or hyperparameter."""


class ShapeError(OctsnError, ValueError):
    """Tensor dimensions do not agree."""


class UsageError(OctsnError, RuntimeError):
    """An API was called in a state where it cannot work."""


class DataError(OctsnError, ValueError):
    """Dataset content violates a contract (empty split, single class, ...)."""


class ManifestParseError(DataError):
    pass


class IntegrityError(OctsnError, IOError):
    """A file on disk is missing, truncated or corrupt."""

    exit_code = 3


class CheckpointError(OctsnError, ValueError):
    pass


class TransferError(CheckpointError):
    pass


class UndefinedMetricError(OctsnError, ValueError):
    pass


class NumericalError(OctsnError, FloatingPointError):
    exit_code = 4
