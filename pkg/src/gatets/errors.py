"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit code (see :mod:`gatets.cli`).
"""


class GateTSError(Exception):
    """Base class for all package errors."""


class ConfigError(GateTSError, ValueError):
    """Invalid hyperparameter or option value."""


class ShapeError(GateTSError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(GateTSError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataError(GateTSError, ValueError):
    """Input series could not be parsed or is unusable."""


class CheckpointError(GateTSError):
    """Checkpoint file is corrupt, from another format version, or incompatible."""


class DivergenceError(NumericError):
    """Training loss became non-finite or exploded.

    ``checkpoint`` holds the last good state, when one exists.
    """

    def __init__(self, message, checkpoint=None, history=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history
