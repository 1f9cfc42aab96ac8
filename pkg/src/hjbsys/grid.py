"""Periodic lattice on the unit torus and the finite-difference operators.

Nodes are stored flat in row-major axis order: in 2D the node ``(i, j)``
(``i`` along axis 0, ``j`` along axis 1) has flat index ``i * n + j`` and sits
at ``(i / n, j / n)``. Every field is an ``(m, n**dim)`` array, one row per
equation.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import PreconditionError, UsageError

__all__ = [
    "PeriodicGrid",
    "SystemField",
    "upwind_gradient",
    "second_difference_trace",
    "trace_stencil",
    "discrete_osc",
    "discrete_lipschitz",
    "one_sided_differences",
    "field_to_csv",
    "field_from_csv",
]


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform periodic lattice with ``n_per_axis`` points along each axis."""

    dim: int
    n_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise UsageError(f"dim must be 1 or 2, got {self.dim}")
        if int(self.n_per_axis) != self.n_per_axis or self.n_per_axis < 4:
            raise UsageError(f"n_per_axis must be an integer >= 4, got {self.n_per_axis}")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_per_axis,) * self.dim

    @property
    def n_nodes(self) -> int:
        return self.n_per_axis**self.dim

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, dim)``."""
        axes = [np.arange(self.n_per_axis) * self.spacing] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=-1)
        pts.setflags(write=False)
        return pts

    def multi_index(self, node: int) -> tuple[int, ...]:
        self._check_node(node)
        return tuple(int(i) for i in np.unravel_index(node, self.shape))

    def node_index(self, multi: Sequence[int]) -> int:
        if len(multi) != self.dim:
            raise UsageError(f"expected {self.dim} indices, got {len(multi)}")
        wrapped = tuple(int(i) % self.n_per_axis for i in multi)
        return int(np.ravel_multi_index(wrapped, self.shape))

    def shift(self, node: int, offset: Sequence[int]) -> int:
        """Node reached from ``node`` by a lattice offset, with wraparound."""
        base = self.multi_index(node)
        return self.node_index([b + o for b, o in zip(base, offset)])

    def neighbors(self, node: int) -> list[int]:
        """The ``2 * dim`` axis neighbours, ordered (+e_0, -e_0, +e_1, -e_1)."""
        out = []
        for k in range(self.dim):
            for s in (1, -1):
                off = [0] * self.dim
                off[k] = s
                out.append(self.shift(node, off))
        return out

    def nearest_node(self, x) -> np.ndarray:
        """Flat index of the nearest node for each point in ``x`` (shape (k, dim))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = np.rint(np.mod(x, 1.0) * self.n_per_axis).astype(int) % self.n_per_axis
        if self.dim == 1:
            return idx[:, 0]
        return idx[:, 0] * self.n_per_axis + idx[:, 1]

    def interpolate(self, values: np.ndarray, x) -> np.ndarray:
        """Periodic (bi)linear interpolation of nodal ``values`` at points ``x``."""
        values = np.asarray(values, dtype=float).reshape(self.shape)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = self.n_per_axis
        s = np.mod(x, 1.0) * n
        lo = np.floor(s).astype(int)
        t = s - lo
        lo %= n
        hi = (lo + 1) % n
        if self.dim == 1:
            return (1 - t[:, 0]) * values[lo[:, 0]] + t[:, 0] * values[hi[:, 0]]
        tx, ty = t[:, 0], t[:, 1]
        return (
            (1 - tx) * (1 - ty) * values[lo[:, 0], lo[:, 1]]
            + tx * (1 - ty) * values[hi[:, 0], lo[:, 1]]
            + (1 - tx) * ty * values[lo[:, 0], hi[:, 1]]
            + tx * ty * values[hi[:, 0], hi[:, 1]]
        )

    def _check_node(self, node):
        if not 0 <= int(node) < self.n_nodes:
            raise UsageError(f"node {node} out of range [0, {self.n_nodes})")


@dataclass
class SystemField:
    """Per-equation nodal values on a :class:`PeriodicGrid`."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[None, :]
        if vals.ndim != 2 or vals.shape[1] != self.grid.n_nodes:
            raise UsageError(
                f"values shape {vals.shape} inconsistent with grid of {self.grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(vals)):
            raise UsageError("field values must be finite")
        self.values = vals

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def component(self, eq: int) -> np.ndarray:
        self._check_eq(eq)
        return self.values[eq]

    def as_array(self, eq: int) -> np.ndarray:
        """Component ``eq`` reshaped to the grid shape."""
        return self.component(eq).reshape(self.grid.shape)

    def copy(self) -> SystemField:
        return SystemField(self.grid, self.values.copy())

    def shifted(self, k: float) -> SystemField:
        return SystemField(self.grid, self.values + k)

    @classmethod
    def zeros(cls, grid: PeriodicGrid, m: int) -> SystemField:
        return cls(grid, np.zeros((m, grid.n_nodes)))

    @classmethod
    def constant(cls, grid: PeriodicGrid, m: int, value: float) -> SystemField:
        return cls(grid, np.full((m, grid.n_nodes), float(value)))

    @classmethod
    def from_functions(
        cls, grid: PeriodicGrid, funcs: Sequence[Callable[[np.ndarray], np.ndarray]]
    ) -> SystemField:
        """Sample one callable per equation; each maps ``(k, dim)`` points to ``(k,)``."""
        pts = grid.points
        rows = [np.broadcast_to(np.asarray(f(pts), dtype=float), (grid.n_nodes,)) for f in funcs]
        return cls(grid, np.stack(rows))

    def _check_eq(self, eq):
        if not 0 <= int(eq) < self.m:
            raise UsageError(f"equation index {eq} out of range [0, {self.m})")


def upwind_gradient(field: SystemField, eq: int, node: int, bias: Sequence[int]) -> np.ndarray:
    """One-sided difference quotients at ``node``.

    Component ``k`` is ``(u(node + bias_k e_k) - u(node)) * bias_k / h``, so
    ``bias_k = +1`` gives the forward and ``-1`` the backward difference.
    """
    grid = field.grid
    u = field.component(eq)
    grid._check_node(node)
    bias = list(bias)
    if len(bias) != grid.dim or any(b not in (1, -1) for b in bias):
        raise UsageError(f"bias must have {grid.dim} entries in {{+1, -1}}, got {bias}")
    out = np.empty(grid.dim)
    for k, b in enumerate(bias):
        off = [0] * grid.dim
        off[k] = b
        out[k] = (u[grid.shift(node, off)] - u[node]) * b / grid.spacing
    return out


def trace_stencil(A, spacing: float) -> dict[tuple[int, ...], float]:
    """Neighbour weights of the monotone stencil for ``trace(A D^2 u)``.

    The operator is ``sum_o w_o (u(x + o h) - u(x))`` over the returned
    offsets; every weight is nonnegative. In 2D the cross derivative uses the
    seven-point stencil along the diagonal matching the sign of ``A[0, 1]``,
    which needs ``|A01| <= min(A00, A11)``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    dim = A.shape[0]
    if A.shape != (dim, dim) or dim not in (1, 2):
        raise UsageError(f"A must be 1x1 or 2x2, got shape {A.shape}")
    if not np.allclose(A, A.T, atol=1e-12):
        raise PreconditionError("diffusion matrix must be symmetric")
    h2 = spacing * spacing
    if dim == 1:
        if A[0, 0] < 0:
            raise PreconditionError("diffusion matrix must be positive semidefinite")
        return {(1,): A[0, 0] / h2, (-1,): A[0, 0] / h2}
    a11, a22, a12 = A[0, 0], A[1, 1], A[0, 1]
    if abs(a12) > min(a11, a22) + 1e-12:
        raise PreconditionError(
            f"|A01|={abs(a12):.6g} exceeds min(A00, A11)={min(a11, a22):.6g}; "
            "the cross-difference stencil would not be monotone"
        )
    w = {
        (1, 0): (a11 - abs(a12)) / h2,
        (-1, 0): (a11 - abs(a12)) / h2,
        (0, 1): (a22 - abs(a12)) / h2,
        (0, -1): (a22 - abs(a12)) / h2,
    }
    if a12 >= 0:
        w[(1, 1)] = w[(-1, -1)] = a12 / h2
    else:
        w[(1, -1)] = w[(-1, 1)] = -a12 / h2
    return {k: max(v, 0.0) for k, v in w.items()}


def second_difference_trace(field: SystemField, eq: int, node: int, A) -> float:
    """Monotone finite-difference approximation of ``trace(A D^2 u)`` at ``node``."""
    grid = field.grid
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (grid.dim, grid.dim):
        raise UsageError(f"A must be {grid.dim}x{grid.dim}, got {A.shape}")
    u = field.component(eq)
    grid._check_node(node)
    total = 0.0
    for off, w in trace_stencil(A, grid.spacing).items():
        total += w * (u[grid.shift(node, off)] - u[node])
    return float(total)


def one_sided_differences(grid: PeriodicGrid, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward difference quotients along every axis.

    ``values`` has shape ``(..., n_nodes)``; both results have shape
    ``(..., n_nodes, dim)``.
    """
    lead = values.shape[:-1]
    u = values.reshape(lead + grid.shape)
    back, fwd = [], []
    for k in range(grid.dim):
        ax = len(lead) + k
        fwd.append(((np.roll(u, -1, axis=ax) - u) / grid.spacing).reshape(lead + (-1,)))
        back.append(((u - np.roll(u, 1, axis=ax)) / grid.spacing).reshape(lead + (-1,)))
    return np.stack(back, axis=-1), np.stack(fwd, axis=-1)


def discrete_osc(field: SystemField, eq: int) -> float:
    u = field.component(eq)
    return float(u.max() - u.min())


def discrete_lipschitz(field: SystemField, eq: int) -> float:
    """Largest neighbour difference quotient ``|u(y) - u(x)| / h``."""
    _, fwd = one_sided_differences(field.grid, field.component(eq)[None, :])
    return float(np.abs(fwd).max())


def _csv_header(dim):
    return ["eq", "i", "j", "x", "y", "value"] if dim == 2 else ["eq", "i", "x", "value"]


def field_to_csv(field: SystemField, path) -> Path:
    """Write ``eq,i[,j],x[,y],value`` rows, one per (equation, node)."""
    path = Path(path)
    grid = field.grid
    idx = np.array(list(itertools.product(range(grid.n_per_axis), repeat=grid.dim)))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_csv_header(grid.dim))
        for eq in range(field.m):
            for node in range(grid.n_nodes):
                ii = [int(v) for v in idx[node]]
                xs = [repr(float(v)) for v in grid.points[node]]
                writer.writerow([eq, *ii, *xs, repr(float(field.values[eq, node]))])
    return path


def field_from_csv(path) -> SystemField:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = reader.fieldnames or []
    if "value" not in header or "eq" not in header:
        raise UsageError(f"{path}: missing mandatory header")
    dim = 2 if "j" in header else 1
    idx_cols = ["i", "j"][:dim]
    n = max(int(r[c]) for r in rows for c in idx_cols) + 1
    m = max(int(r["eq"]) for r in rows) + 1
    grid = PeriodicGrid(dim, n)
    vals = np.full((m, grid.n_nodes), np.nan)
    for r in rows:
        node = grid.node_index([int(r[c]) for c in idx_cols])
        vals[int(r["eq"]), node] = float(r["value"])
    if np.isnan(vals).any():
        raise UsageError(f"{path}: incomplete field snapshot")
    return SystemField(grid, vals)
