"""Exception taxonomy shared across the package.

CLI exit codes map onto these groups: ConfigError -> 2, DataError /
CheckpointError -> 3, NumericError -> 4, anything else -> 1.
"""


class SupernasError(Exception):
    """Base class for all package errors."""


class MalformedRangeError(SupernasError, ValueError):
    """Factor range with a nonpositive step or a span that is not a step multiple."""


class ArchValidationError(SupernasError, ValueError):
    """Architecture config violates its search-space spec."""


class EnumerationCapError(SupernasError, RuntimeError):
    """Explicit enumeration would exceed the configured cap."""


class ShapeError(SupernasError, ValueError):
    """Tensor operands with incompatible shapes."""


class NumericError(SupernasError, ArithmeticError):
    """Non-finite values produced by a numeric computation."""


class ContractError(SupernasError, ValueError):
    """Caller violated an operation precondition."""


class NoFitError(SupernasError, LookupError):
    """No stored architecture satisfies the requested resource budget."""


class DataError(SupernasError, RuntimeError):
    """Dataset missing, unreadable, or degenerate."""


class CheckpointError(SupernasError, RuntimeError):
    """Checkpoint container corrupt, wrong version, or spec mismatch."""


class ConfigError(SupernasError, ValueError):
    """Run configuration file missing, malformed, or semantically invalid."""
