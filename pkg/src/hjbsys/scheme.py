"""Monotone spatial discretization shared by the stationary and evolution solvers.

For a field ``u`` of shape ``(..., m, n_nodes)`` the operator returns

    F_i[u](x) = -sum_o w_i,o(x) (u_i(x + o h) - u_i(x)) + G_i(x, a, b) + sum_j d_ij u_j(x)

where ``a``/``b`` are backward/forward differences clamped to ``[-R, R]``
and ``G_i`` is a monotone numerical Hamiltonian. Two fluxes are available:

* ``"upwind"`` (default): every catalog term contributes its own monotone
  flux (Godunov for radial powers, sign upwinding for drifts and controls).
* ``"lax_friedrichs"``: ``H(x, (a + b) / 2) - sum_k lam_k(x) (b_k - a_k) / 2``
  with ``lam_k(x)`` the slope bound of ``H`` over the cube ``[-R, R]^dim``.

Both are nondecreasing in every neighbour value and nonincreasing in the
centre value once the explicit step respects :meth:`SpatialOperator.step_bound`.
"""

from __future__ import annotations

import numpy as np

from .errors import PreconditionError, UsageError
from .grid import PeriodicGrid, discrete_lipschitz
from .model import ModelSpec

__all__ = ["SpatialOperator", "stencil_weights", "auto_radius", "SCHEMES"]

SCHEMES = ("upwind", "lax_friedrichs")


def stencil_weights(A: np.ndarray, spacing: float) -> dict[tuple[int, ...], np.ndarray]:
    """Nodewise weights of the monotone ``trace(A D^2 u)`` stencil.

    ``A`` has shape ``(n_nodes, dim, dim)``. Offsets whose weight vanishes
    everywhere are dropped.
    """
    n, dim, _ = A.shape
    h2 = spacing * spacing
    if not np.allclose(A, np.swapaxes(A, 1, 2), atol=1e-12):
        raise PreconditionError("diffusion matrix must be symmetric")
    if dim == 1:
        a = A[:, 0, 0]
        if np.any(a < -1e-14):
            raise PreconditionError("diffusion matrix must be positive semidefinite")
        w = np.maximum(a, 0.0) / h2
        out = {(1,): w, (-1,): w}
    else:
        a11, a22, a12 = A[:, 0, 0], A[:, 1, 1], A[:, 0, 1]
        bad = np.abs(a12) > np.minimum(a11, a22) + 1e-12
        if np.any(bad):
            node = int(np.flatnonzero(bad)[0])
            raise PreconditionError(
                f"node {node}: |A01|={abs(a12[node]):.6g} exceeds min(A00, A11)="
                f"{min(a11[node], a22[node]):.6g}; cross-difference stencil would not be monotone"
            )
        ax = np.maximum(a11 - np.abs(a12), 0.0) / h2
        ay = np.maximum(a22 - np.abs(a12), 0.0) / h2
        dp = np.maximum(a12, 0.0) / h2
        dm = np.maximum(-a12, 0.0) / h2
        out = {
            (1, 0): ax, (-1, 0): ax, (0, 1): ay, (0, -1): ay,
            (1, 1): dp, (-1, -1): dp, (1, -1): dm, (-1, 1): dm,
        }
    return {o: w for o, w in out.items() if np.any(w != 0)}


def auto_radius(fields, floor: float = 1.0) -> float:
    """Default truncation radius: four times the largest discrete Lipschitz constant."""
    lip = floor
    for f in fields:
        lip = max(lip, max(discrete_lipschitz(f, eq) for eq in range(f.m)))
    return 4.0 * lip


class SpatialOperator:
    """Discrete ``F[u]`` for one model on one grid with truncation radius ``R``."""

    def __init__(self, model: ModelSpec, grid: PeriodicGrid, radius: float, scheme: str = "upwind"):
        if model.dim != grid.dim:
            raise UsageError(f"model dim {model.dim} does not match grid dim {grid.dim}")
        if scheme not in SCHEMES:
            raise UsageError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        if not (np.isfinite(radius) and radius > 0):
            raise UsageError(f"truncation radius must be positive and finite, got {radius}")
        self.model = model
        self.grid = grid
        self.radius = float(radius)
        self.scheme = scheme
        x = grid.points
        self._terms = [model.bind(eq, x) for eq in range(model.m)]
        A = [d.A(x) for d in model.diffusions]
        self.max_a = float(max(np.abs(a).max() for a in A))
        self._stencils = [stencil_weights(a, grid.spacing) for a in A]
        self._stencils_active = any(self._stencils)
        self._nbr: dict[tuple[int, ...], np.ndarray] = {}
        cube = np.full((grid.n_nodes, grid.dim), self.radius)
        self._lam = []
        for terms in self._terms:
            lam = np.zeros((grid.n_nodes, grid.dim))
            for t in terms:
                lam = lam + t.slope(-cube, cube)
            self._lam.append(lam)
        self.lambda_max = float(max(lam.max() for lam in self._lam))
        self.D = model.coupling.d

    @property
    def m(self) -> int:
        return self.model.m

    def step_bound(self, epsilon: float = 0.0) -> float:
        """Largest explicit step keeping the update monotone."""
        h = self.grid.spacing
        dim = self.grid.dim
        denom = (
            epsilon
            + 2 * dim * self.max_a / h**2
            + 2 * dim * self.lambda_max / h
            + self.model.coupling.max_row_sum
        )
        return np.inf if denom == 0 else 1.0 / denom

    def _neighbor(self, offset) -> np.ndarray:
        idx = self._nbr.get(offset)
        if idx is None:
            n = self.grid.n_per_axis
            multi = np.indices(self.grid.shape).reshape(self.grid.dim, -1)
            moved = [(multi[k] + offset[k]) % n for k in range(self.grid.dim)]
            idx = np.ravel_multi_index(moved, self.grid.shape)
            self._nbr[offset] = idx
        return idx

    def differences(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unclamped backward and forward differences, shape ``(..., n_nodes, dim)``."""
        h = self.grid.spacing
        dim = self.grid.dim
        back = np.empty(values.shape + (dim,))
        fwd = np.empty(values.shape + (dim,))
        for k in range(dim):
            e = tuple(1 if j == k else 0 for j in range(dim))
            fwd[..., k] = values[..., self._neighbor(e)] - values
            back[..., k] = values - values[..., self._neighbor(tuple(-v for v in e))]
        fwd /= h
        back /= h
        return back, fwd

    def hamiltonian(self, values: np.ndarray, diffs=None) -> np.ndarray:
        """Numerical Hamiltonian ``G_i(x, a, b)`` for every equation and node."""
        back, fwd = diffs if diffs is not None else self.differences(values)
        R = self.radius
        back = np.clip(back, -R, R)
        fwd = np.clip(fwd, -R, R)
        out = np.zeros(values.shape)
        for eq, terms in enumerate(self._terms):
            a, b = back[..., eq, :, :], fwd[..., eq, :, :]
            if self.scheme == "upwind":
                for t in terms:
                    out[..., eq, :] += t.flux(a, b)
            else:
                mid = 0.5 * (a + b)
                for t in terms:
                    out[..., eq, :] += t.value(mid)
                out[..., eq, :] -= 0.5 * np.sum(self._lam[eq] * (b - a), axis=-1)
        return out

    def diffusion(self, values: np.ndarray, diffs=None) -> np.ndarray:
        """``sum_o w_o (u(x + o h) - u(x))``, the discrete ``trace(A D^2 u)``."""
        back, fwd = diffs if diffs is not None else self.differences(values)
        h = self.grid.spacing
        out = np.zeros(values.shape)
        for eq, stencil in enumerate(self._stencils):
            u = values[..., eq, :]
            for off, w in stencil.items():
                nz = [k for k, o in enumerate(off) if o != 0]
                if len(nz) == 1:
                    k = nz[0]
                    d = fwd[..., eq, :, k] if off[k] > 0 else -back[..., eq, :, k]
                    out[..., eq, :] += (w * h) * d
                else:
                    out[..., eq, :] += w * (u[..., self._neighbor(off)] - u)
        return out

    def apply(self, values: np.ndarray) -> np.ndarray:
        """``F[u]`` for values of shape ``(..., m, n_nodes)``."""
        values = np.asarray(values, dtype=float)
        if values.shape[-2:] != (self.m, self.grid.n_nodes):
            raise UsageError(
                f"field shape {values.shape[-2:]} does not match (m, n_nodes)=({self.m}, {self.grid.n_nodes})"
            )
        diffs = self.differences(values)
        out = self.hamiltonian(values, diffs)
        if self._stencils_active:
            out -= self.diffusion(values, diffs)
        out += np.einsum("ij,...jn->...in", self.D, values)
        return out

    def residual(self, values: np.ndarray, epsilon: float = 0.0) -> np.ndarray:
        return epsilon * values + self.apply(values)
