"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TalkDistillError(Exception):
    exit_code = 1


class ConfigError(TalkDistillError, ValueError):
    exit_code = 2


class DataError(TalkDistillError, ValueError):
    exit_code = 3


class NumericalError(TalkDistillError, FloatingPointError):
    exit_code = 4


class ContractError(TalkDistillError, RuntimeError):
    exit_code = 5


class DimensionError(ContractError, ValueError):
    """Shape mismatch between operands."""
