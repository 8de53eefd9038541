"""Exception hierarchy. Each class carries a short ``category`` used for CLI exit reporting."""


class MetaDDError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(MetaDDError):
    category = "config"
    exit_code = 2


class ContractError(MetaDDError, ValueError):
    category = "contract"
    exit_code = 2


class IngestionError(MetaDDError):
    category = "ingestion"
    exit_code = 3


class IntegrityError(IngestionError):
    category = "integrity"


class FormatError(MetaDDError):
    category = "format"
    exit_code = 3


class NumericError(MetaDDError, ArithmeticError):
    category = "numeric"
    exit_code = 4

    def __init__(self, message, component=None, breakdown=None, last_valid=None):
        super().__init__(message)
        self.component = component
        self.breakdown = breakdown
        self.last_valid = last_valid


class TrainingError(NumericError):
    category = "training"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class WrongFamilyError(ContractError):
    category = "wrong-family"


class LockError(MetaDDError):
    category = "lock"
    exit_code = 5
