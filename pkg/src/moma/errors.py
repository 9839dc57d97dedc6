"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, CheckpointError -> 4.
"""


class MomaError(Exception):
    """Base class for all package errors."""


class ConfigError(MomaError):
    """Invalid or inconsistent configuration."""


class DataError(MomaError):
    """Bad input data (token ids out of range, exhausted generators, ...)."""


class CheckpointError(MomaError):
    """Unreadable, corrupt, or incompatible checkpoint."""


class ContractError(MomaError):
    """An internal contract was violated (shape mismatch, non-finite values
    in validation mode, backward on a non-scalar, ...)."""


class ShapeError(ContractError):
    """Dimension mismatch between operands; message names both shapes."""
