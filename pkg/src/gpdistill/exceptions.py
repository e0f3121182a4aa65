"""Error types shared across the package.

Each class maps onto a CLI exit code (see ``gpdistill.cli``).
"""


class GPDError(Exception):
    exit_code = 1


class ConfigurationError(GPDError, ValueError):
    exit_code = 2


class ContractError(GPDError, ValueError):
    """Raised when a call violates a shape or routing contract."""

    exit_code = 2


class IngestionError(GPDError, IOError):
    exit_code = 3


class TrainingDivergence(GPDError, RuntimeError):
    exit_code = 4

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
