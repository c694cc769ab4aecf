"""Exception hierarchy shared across the package."""


class FitHandError(Exception):
    """Base class for every error raised by fithand."""


class ShapeError(FitHandError, ValueError):
    """Tensor dimensions do not line up."""


class ConfigError(FitHandError, ValueError):
    """Invalid hyper-parameter or architecture configuration."""


class NumericError(FitHandError, ArithmeticError):
    """A computation produced NaN or Inf."""


class InputError(FitHandError, ValueError):
    """Bad user data, e.g. an out-of-range class label."""


class IngestionError(FitHandError):
    """A dataset directory could not be read."""


class CheckpointError(FitHandError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass
