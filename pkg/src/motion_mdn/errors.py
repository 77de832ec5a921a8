"""Exception hierarchy. Each family maps to one CLI exit code."""


class MotionError(Exception):
    exit_code = 1


class ConfigError(MotionError):
    exit_code = 2


class DataError(MotionError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyInputError(DataError):
    pass


class InsufficientLengthError(DataError):
    pass


class ShapeError(MotionError, ValueError):
    exit_code = 3


class ContractError(MotionError, ValueError):
    exit_code = 2


class NumericError(MotionError, ArithmeticError):
    exit_code = 4


class CheckpointError(DataError):
    """Unreadable, truncated, or inconsistent checkpoint file."""
