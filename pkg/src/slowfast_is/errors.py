"""Exception hierarchy for slowfast_is."""

from __future__ import annotations


class SlowFastError(Exception):
    """Base class for all package errors."""


class ModelError(SlowFastError, ValueError):
    """A model does not meet the structural requirements of an operation."""


class DissipativityViolation(ModelError):
    """The fast subsystem fails the contraction probe (no exponential mixing)."""


class IntegrationDiverged(SlowFastError, FloatingPointError):
    """An SDE path produced a non-finite state."""

    def __init__(self, time: float, message: str | None = None):
        self.time = float(time)
        super().__init__(message or f"integration diverged at s={self.time:.17g}")


class EllipticityViolation(SlowFastError, ValueError):
    """Averaged diffusion is not positive definite (or under the configured floor)."""


class IllPosedConfig(SlowFastError, ValueError):
    """Discretization parameters make a linear solve singular or meaningless."""


class PositivityViolation(SlowFastError, ArithmeticError):
    """A Feynman-Kac solution lost strict positivity; the grid is too coarse."""


class TooManyFailures(SlowFastError, RuntimeError):
    """More than the tolerated fraction of trajectories diverged."""

    def __init__(self, n_failed: int, n_total: int):
        self.n_failed = n_failed
        self.n_total = n_total
        super().__init__(f"{n_failed} of {n_total} trajectories diverged")
