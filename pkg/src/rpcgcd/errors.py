"""Shared exception types.

The CLI maps these onto exit codes: config/usage problems -> 1,
numerical failures -> 2, file format and I/O problems -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class ParameterError(ValueError):
    """An argument outside its documented range (e.g. temperature <= 0)."""


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """A call violated an operation precondition (e.g. batch too small)."""


class NonFiniteError(FloatingPointError):
    """A forward computation produced NaN or Inf."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
