"""scikit-learn style wrappers around the stationary solvers.

``fit`` takes the model (instance or builtin name) where sklearn would take
training data; ``predict`` interpolates the computed field at query points.
Hyperparameters live in ``__init__`` so ``get_params``/``set_params`` and
``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_epsilons, check_model, check_points, check_positive
from .grid import PeriodicGrid
from .steady import DiscountedConfig, solve_discounted, solve_ergodic

__all__ = ["DiscountedSolver", "ErgodicSolver"]


class _FieldEstimator(BaseEstimator):
    def _grid(self, model):
        return PeriodicGrid(model.dim, int(self.n))

    def predict(self, X):
        """Field values at the points ``X`` (shape ``(k, dim)``), one column per equation."""
        check_is_fitted(self, "field_")
        X = check_points(X, self.field_.grid.dim)
        return np.stack([self.field_.grid.interpolate(self.field_.values[i], X) for i in range(self.field_.m)],
                        axis=1)


class DiscountedSolver(_FieldEstimator):
    """Solve ``eps phi + F[phi] = 0``; ``field_`` holds the grid solution."""

    def __init__(self, epsilon=0.1, n=128, dim=1, residual_tol=1e-10, truncation_radius=None,
                 scheme="upwind"):
        self.epsilon = epsilon
        self.n = n
        self.dim = dim
        self.residual_tol = residual_tol
        self.truncation_radius = truncation_radius
        self.scheme = scheme

    def fit(self, model, y=None):
        model = check_model(model, self.dim)
        cfg = DiscountedConfig(epsilon=check_positive("epsilon", self.epsilon), residual_tol=self.residual_tol,
                               truncation_radius=self.truncation_radius, scheme=self.scheme)
        self.field_, self.report_ = solve_discounted(model, self._grid(model), cfg)
        return self


class ErgodicSolver(_FieldEstimator):
    """Vanishing-discount ergodic pair; ``c_`` is the constant, ``field_`` the corrector."""

    def __init__(self, schedule=(0.1, 0.02, 0.004, 0.001), n=128, dim=1, anchor=0, mode="anchor",
                 ergodic_tol=1e-3, residual_tol=1e-10, refine=False):
        self.schedule = schedule
        self.n = n
        self.dim = dim
        self.anchor = anchor
        self.mode = mode
        self.ergodic_tol = ergodic_tol
        self.residual_tol = residual_tol
        self.refine = refine

    def fit(self, model, y=None):
        model = check_model(model, self.dim)
        self.solution_ = solve_ergodic(model, self._grid(model), check_epsilons(self.schedule), self.anchor,
                                       self.mode, DiscountedConfig(residual_tol=self.residual_tol),
                                       self.ergodic_tol, refine=self.refine)
        self.c_ = float(self.solution_.c_scalar)
        self.field_ = self.solution_.v
        return self
