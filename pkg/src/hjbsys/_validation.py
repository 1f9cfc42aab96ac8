"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .errors import UsageError
from .model import ModelSpec, builtin


def check_points(X, dim: int) -> np.ndarray:
    """Return ``X`` as a finite float array of shape ``(k, dim)``, wrapped into ``[0, 1)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and dim == 1:
        X = X[:, None]
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != dim:
        raise UsageError(f"expected points with {dim} coordinates, got {X.shape[1]}")
    return np.mod(X, 1.0)


def check_model(model, dim: int = 1) -> ModelSpec:
    """Accept a :class:`ModelSpec` or a builtin name."""
    if isinstance(model, ModelSpec):
        return model
    if isinstance(model, str):
        return builtin(model, dim)
    raise UsageError(f"model must be a ModelSpec or builtin name, got {type(model).__name__}")


def check_positive(name: str, value) -> float:
    v = float(value)
    if not (np.isfinite(v) and v > 0):
        raise UsageError(f"{name} must be positive and finite, got {value!r}")
    return v


def check_epsilons(epsilons) -> list[float]:
    eps = [check_positive("epsilon", e) for e in epsilons]
    if not eps:
        raise UsageError("need at least one epsilon")
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise UsageError("epsilon schedule must be strictly decreasing")
    return eps
