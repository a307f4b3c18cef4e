"""Error taxonomy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, NumericFailure -> 3,
ArtifactIOError -> 4. ContractViolation signals a caller bug and is allowed
to escape as a normal traceback in library use.
"""


class FlowoptError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(FlowoptError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericFailure(FlowoptError, ArithmeticError):
    """A non-finite value appeared where the contract forbids it.

    ``where`` identifies the failing site (graph node id, integration step
    index, training stage tag, ...).
    """

    def __init__(self, message: str, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class ConfigError(FlowoptError, ValueError):
    """Invalid or inconsistent run configuration."""


class ArtifactIOError(FlowoptError, OSError):
    """Failure reading or writing run artifacts (datasets, checkpoints, reports)."""


class UnsupportedDimensionError(FlowoptError, ValueError):
    """Operation only defined for a fixed number of objectives (2)."""


class DegenerateRangeError(FlowoptError, ValueError):
    """An objective has zero observed range; an explicit reference point is required."""
