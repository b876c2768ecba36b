"""Exception types shared across the package.

Each maps to a stable CLI exit code (see cli.py): ConfigError -> 2,
DataError -> 3, ShapeError / ContractError -> 4.
"""


class GradeditError(Exception):
    """Base class for all package errors."""


class ShapeError(GradeditError):
    """Operand dimensions are incompatible."""


class ConfigError(GradeditError):
    """A configuration value violates its invariants."""


class DataError(GradeditError):
    """A dataset file or record is malformed or incomplete."""


class ContractError(GradeditError):
    """A caller broke an API contract (e.g. stale forward trace)."""
