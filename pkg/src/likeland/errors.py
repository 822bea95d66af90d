"""Exception hierarchy.

Each class carries the process exit code the command line maps it to.
"""


class LikelandError(Exception):
    exit_code = 1


class DimensionError(LikelandError, ValueError):
    exit_code = 2


class ContractError(LikelandError, ValueError):
    exit_code = 2


class NumericError(LikelandError, ArithmeticError):
    exit_code = 3


class OracleError(NumericError):
    pass


class ConfigError(LikelandError, ValueError):
    exit_code = 2


class InputError(LikelandError, ValueError):
    exit_code = 2


class FormatError(LikelandError, ValueError):
    exit_code = 2


class ConsistencyError(FormatError):
    pass


class TrainingDivergence(LikelandError, RuntimeError):
    exit_code = 3

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class ArtifactCorruption(LikelandError, IOError):
    exit_code = 4
