"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MalError(Exception):
    exit_code = 1


class ConfigError(MalError, ValueError):
    exit_code = 2


class ContractError(MalError, ValueError):
    """A precondition between two objects (models, plans, masks) is violated."""

    exit_code = 2


class ShapeError(MalError, ValueError):
    exit_code = 2


class SizeError(MalError, ValueError):
    exit_code = 2


class NumericError(MalError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class FormatError(MalError, ValueError):
    exit_code = 4


class LengthError(FormatError):
    pass
