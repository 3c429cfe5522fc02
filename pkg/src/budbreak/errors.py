"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (usage=2, data=3, runtime=4).
"""


class BudbreakError(Exception):
    """Base class for all package errors."""


class ShapeError(BudbreakError, ValueError):
    """Operand shapes are inconsistent; message names both shapes."""


class DataError(BudbreakError, ValueError):
    """Malformed or inconsistent input data (CSV rows, schemas, labels)."""


class CheckpointError(BudbreakError, ValueError):
    """Checkpoint file is unreadable, corrupt, or mismatches the request."""


class ConfigError(BudbreakError, ValueError):
    """Invalid configuration (dims, variant names, option combinations)."""


class TrainingDiverged(BudbreakError, RuntimeError):
    """Non-finite loss encountered during training; message carries epoch/batch."""
