"""Exception types shared across the package."""


class AlphamineError(Exception):
    """Base class for all package-specific failures."""


class DataError(AlphamineError):
    """Malformed or inconsistent market data."""


class DegenerateVectorError(AlphamineError):
    """A cross-section is constant or has too few complete observations."""


class ExpressionParseError(AlphamineError):
    """An expression token sequence or infix string failed to parse.

    ``index`` is the position of the offending token when known.
    """

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (token index {index})"
        super().__init__(message)
        self.index = index


class EmptyPoolError(AlphamineError):
    """An operation needed at least one alpha in the pool."""


class OptimizationError(AlphamineError):
    """Weight optimization diverged or produced non-finite values."""


class ContractViolation(AlphamineError):
    """A caller broke an interface precondition, e.g. stepping a masked action."""


class UpdateError(AlphamineError):
    """A policy update produced a non-finite loss and was aborted."""


class GenerationError(AlphamineError):
    """Synthetic data generation could not satisfy its own constraints."""
