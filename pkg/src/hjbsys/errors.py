"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class HJBError(Exception):
    """Base class for package errors."""


class UsageError(HJBError, ValueError):
    """Bad arguments: out-of-range indices, malformed configs, unknown names."""


class ModelDefinitionError(HJBError, ValueError):
    """A model evaluates to something non-finite or is internally inconsistent."""


class PreconditionError(HJBError, ValueError):
    """A structural hypothesis required by an operation does not hold."""


class DivergenceError(HJBError, RuntimeError):
    """A solver produced non-finite values."""

    def __init__(self, message, *, node=None, last_good_time=None):
        super().__init__(message)
        self.node = node
        self.last_good_time = last_good_time


class NonConvergenceError(HJBError, RuntimeError):
    """An iteration hit its budget before reaching the residual tolerance."""

    def __init__(self, message, *, history=()):
        super().__init__(message)
        self.history = list(history)


class PropertyViolation(HJBError, RuntimeError):
    """A mathematical property that must hold for the discrete scheme failed.

    ``invariant`` names the violated property so callers (and the CLI exit
    code) can distinguish it from operational errors.
    """

    def __init__(self, invariant: str, message: str):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant


class ErgodicInconsistencyError(PropertyViolation):
    """Per-equation ergodic constants disagree beyond tolerance."""

    def __init__(self, message: str):
        super().__init__("ergodic_constant_equal", message)
