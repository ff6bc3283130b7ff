"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class DeptexError(Exception):
    exit_code = 1


class ConfigError(DeptexError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """An argument lies outside the domain an operation accepts."""


class DimensionError(ConfigError):
    """Tensor shapes do not agree."""


class ContractError(DeptexError, RuntimeError):
    exit_code = 2


class DataError(DeptexError, ValueError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(DeptexError, ArithmeticError):
    exit_code = 4
