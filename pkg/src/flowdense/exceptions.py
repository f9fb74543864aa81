"""Custom exceptions for flowdense."""

from typing import Any


class FlowDenseError(Exception):
    """Base class for all flowdense errors."""


class DimensionMismatchError(FlowDenseError, ValueError):
    """Raised when array arguments disagree on the spatial dimension or count."""


class UnknownSectionKindError(FlowDenseError, ValueError):
    """Raised when a kernel section has a kind other than value or gradient."""

    def __init__(self, kind: str) -> None:
        self.kind = kind
        super().__init__(f"Unknown kernel section kind: {kind!r}")


class FlowDivergenceError(FlowDenseError):
    """Raised when the shooting ODE produces a non-finite state."""

    def __init__(self, node: int, message: str | None = None) -> None:
        self.node = node
        super().__init__(message or f"Flow integration diverged at time node {node}")


class DegenerateFitError(FlowDenseError):
    """Raised when every EM restart collapses onto a degenerate component."""


class OptimizerStalledError(FlowDenseError):
    """Raised when the Armijo line search cannot find an ascent step.

    The best state reached so far travels with the exception so callers can
    still persist it.
    """

    def __init__(self, message: str, best_estimate: Any | None = None) -> None:
        self.best_estimate = best_estimate
        super().__init__(message)


class UnsupportedDimensionError(FlowDenseError):
    """Raised when an operation only defined for d=1 receives other data."""

    def __init__(self, dim: int, operation: str) -> None:
        self.dim = dim
        super().__init__(f"{operation} supports d=1 only, got d={dim}")


class DataError(FlowDenseError):
    """Raised when input data cannot be read or is malformed."""

    def __init__(self, message: str, original_error: Exception | None = None) -> None:
        self.original_error = original_error
        super().__init__(message)


class ArtifactError(FlowDenseError):
    """Raised when an output artifact cannot be written or read back."""

    def __init__(self, path: str, original_error: Exception | None = None) -> None:
        self.path = path
        self.original_error = original_error
        super().__init__(f"Failed to write or read artifact '{path}': {original_error}")
