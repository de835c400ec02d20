"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class InputError(ValueError):
    """An argument is outside the operation's domain."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class ConfigError(ValueError):
    """A run or search configuration is invalid or incomplete."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt, truncated or of an unsupported version."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position
