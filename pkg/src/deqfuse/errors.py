"""Typed errors raised across deqfuse."""

from typing import Any, Dict, Optional, TYPE_CHECKING

if TYPE_CHECKING:
    from deqfuse.baseSolver import SolverTrace


class DeqFuseError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(DeqFuseError, ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(DeqFuseError, ValueError):
    """A configuration value or combination of values is invalid."""


class NumericError(DeqFuseError, ArithmeticError):
    """A numerical procedure failed (singular system, non-finite value)."""


class DivergenceError(NumericError):
    """A fixed-point or adjoint iteration blew up; carries the partial trace."""

    def __init__(self, message: str, trace: Optional["SolverTrace"] = None) -> None:
        super().__init__(message)
        self.trace = trace


class ConvergenceError(NumericError):
    """An equilibrium needed for implicit gradients never reached its tolerance."""

    def __init__(self, message: str, trace: Optional["SolverTrace"] = None) -> None:
        super().__init__(message)
        self.trace = trace


class StateError(DeqFuseError, RuntimeError):
    """An operation needs state that was never produced (e.g. a forward cache)."""


class TrainingAbortedError(NumericError):
    """Training stopped on a non-finite loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
