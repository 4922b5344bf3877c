"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class SapError(Exception):
    exit_code = 5


class InputError(SapError, ValueError):
    """An argument is outside the domain an operation accepts."""

    exit_code = 2


class DimensionError(InputError):
    """Tensor shapes do not compose."""


class StateError(SapError, RuntimeError):
    """Operation invoked on an object in the wrong lifecycle state."""


class NumericError(SapError, ArithmeticError):
    """NaN or overflow produced by a computation."""

    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class ConfigError(SapError):
    exit_code = 2


class DataError(SapError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(DataError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (index {index})")
        self.index = index


class CompatibilityError(SapError):
    exit_code = 2


class InvariantError(SapError):
    exit_code = 5
