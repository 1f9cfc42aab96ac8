import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjbsys.errors import PreconditionError, UsageError
from hjbsys.grid import (
    PeriodicGrid,
    SystemField,
    discrete_lipschitz,
    discrete_osc,
    field_from_csv,
    field_to_csv,
    second_difference_trace,
    upwind_gradient,
)

TWO_PI = 2 * math.pi


def field_1d(n, *funcs):
    g = PeriodicGrid(1, n)
    x = g.points[:, 0]
    return SystemField(g, np.stack([f(x) for f in funcs]))


@given(st.integers(1, 2), st.integers(4, 40))
def test_spacing_and_neighbors(dim, n):
    g = PeriodicGrid(dim, n)
    assert abs(g.spacing * g.n_per_axis - 1) <= 1e-15
    for node in {0, g.n_nodes // 2, g.n_nodes - 1}:
        nb = g.neighbors(node)
        assert len(nb) == 2 * dim
        for other in nb:
            assert node in g.neighbors(other)


def test_grid_rejects_bad_sizes():
    with pytest.raises(UsageError):
        PeriodicGrid(3, 8)
    with pytest.raises(UsageError):
        PeriodicGrid(1, 3)


def test_upwind_gradient_constant():
    f = SystemField.constant(PeriodicGrid(2, 8), 2, 3.5)
    assert np.all(upwind_gradient(f, 1, 5, (1, -1)) == 0)


def test_upwind_gradient_sine():
    f = field_1d(256, lambda x: np.sin(TWO_PI * x) / TWO_PI)
    assert abs(upwind_gradient(f, 0, 0, (1,))[0] - 1) < 0.05


def test_upwind_gradient_wraps_across_seam():
    n = 32
    h = 1 / n
    f = field_1d(n, lambda x: x)
    assert upwind_gradient(f, 0, n - 1, (1,))[0] == pytest.approx(-(1 - h) / h, rel=1e-12)


def test_upwind_gradient_index_errors():
    f = SystemField.zeros(PeriodicGrid(1, 8), 1)
    with pytest.raises(UsageError):
        upwind_gradient(f, 1, 0, (1,))
    with pytest.raises(UsageError):
        upwind_gradient(f, 0, 8, (1,))
    with pytest.raises(UsageError):
        upwind_gradient(f, 0, 0, (2,))


def test_second_difference_examples():
    const = SystemField.constant(PeriodicGrid(1, 16), 1, 2.0)
    assert second_difference_trace(const, 0, 3, [[1.0]]) == 0
    f = field_1d(256, lambda x: np.cos(TWO_PI * x))
    assert abs(second_difference_trace(f, 0, 0, [[1.0]]) + 4 * math.pi**2) < 0.05
    assert second_difference_trace(f, 0, 7, [[0.0]]) == 0


def test_second_difference_rejects_non_monotone_cross_term():
    f = SystemField.zeros(PeriodicGrid(2, 8), 1)
    with pytest.raises(PreconditionError):
        second_difference_trace(f, 0, 0, [[1.0, 0.8], [0.8, 0.5]])


def test_second_difference_2d_mixed_term():
    # u = cos(2 pi (x + y)): trace(A D^2 u) = -(4 pi^2)(a11 + a22 + 2 a12) u
    g = PeriodicGrid(2, 128)
    p = g.points
    u = np.cos(TWO_PI * (p[:, 0] + p[:, 1]))
    A = np.array([[1.0, 0.3], [0.3, 0.6]])
    val = second_difference_trace(SystemField(g, u[None]), 0, 0, A)
    assert val == pytest.approx(-4 * math.pi**2 * (1 + 0.6 + 0.6), rel=2e-2)


def test_osc_examples():
    assert discrete_osc(SystemField.constant(PeriodicGrid(1, 8), 1, 1.0), 0) == 0
    f = field_1d(64, lambda x: np.ones_like(x), lambda x: np.cos(TWO_PI * x))
    assert discrete_osc(f, 0) == 0
    assert abs(discrete_osc(f, 1) - 2) < 1e-3


def test_lipschitz_examples():
    assert discrete_lipschitz(SystemField.constant(PeriodicGrid(2, 8), 1, 1.0), 0) == 0
    f = field_1d(128, lambda x: np.sin(TWO_PI * x) / TWO_PI)
    assert abs(discrete_lipschitz(f, 0) - 1) < 0.05


@given(st.floats(-5, 5), st.integers(0, 63))
def test_lipschitz_homogeneous_and_shift_invariant(scale, shift):
    rng = np.random.default_rng(7)
    g = PeriodicGrid(1, 64)
    u = rng.normal(size=(1, 64))
    f = SystemField(g, u)
    lip = discrete_lipschitz(f, 0)
    assert discrete_lipschitz(SystemField(g, scale * u), 0) == pytest.approx(abs(scale) * lip, rel=1e-12, abs=1e-12)
    rolled = SystemField(g, np.roll(u, shift, axis=-1))
    assert discrete_lipschitz(rolled, 0) == pytest.approx(lip, rel=1e-12)
    assert discrete_osc(rolled, 0) == pytest.approx(discrete_osc(f, 0), rel=1e-12)


def test_shift_invariance_2d():
    rng = np.random.default_rng(1)
    g = PeriodicGrid(2, 12)
    u = rng.normal(size=(12, 12))
    a = SystemField(g, u.reshape(1, -1))
    b = SystemField(g, np.roll(u, (3, 5), axis=(0, 1)).reshape(1, -1))
    assert discrete_lipschitz(a, 0) == pytest.approx(discrete_lipschitz(b, 0))
    assert discrete_osc(a, 0) == pytest.approx(discrete_osc(b, 0))


def _order(errors):
    return [math.log2(e0 / e1) for e0, e1 in zip(errors, errors[1:])]


def test_consistency_orders():
    # node x = 0.1 exists on every grid n = 20 * 2^k
    grad_err, lap_err = [], []
    for n in (20, 40, 80, 160):
        f = field_1d(n, lambda x: np.cos(TWO_PI * x))
        node = n // 10
        grad_err.append(abs(upwind_gradient(f, 0, node, (1,))[0] + TWO_PI * math.sin(0.2 * math.pi)))
        lap_err.append(abs(second_difference_trace(f, 0, node, [[1.0]]) + 4 * math.pi**2 * math.cos(0.2 * math.pi)))
    assert all(abs(o - 1) <= 0.3 for o in _order(grad_err))
    assert all(abs(o - 2) <= 0.3 for o in _order(lap_err))


def test_field_validation():
    g = PeriodicGrid(1, 8)
    with pytest.raises(UsageError):
        SystemField(g, np.zeros((1, 7)))
    with pytest.raises(UsageError):
        SystemField(g, np.full((1, 8), np.nan))


@pytest.mark.parametrize("dim", [1, 2])
def test_csv_round_trip(tmp_path, dim):
    g = PeriodicGrid(dim, 6)
    rng = np.random.default_rng(3)
    f = SystemField(g, rng.normal(size=(2, g.n_nodes)))
    path = field_to_csv(f, tmp_path / "f.csv")
    header = path.read_text().splitlines()[0]
    assert header == ("eq,i,x,value" if dim == 1 else "eq,i,j,x,y,value")
    back = field_from_csv(path)
    assert back.grid.n_per_axis == 6 and back.grid.dim == dim
    np.testing.assert_array_equal(back.values, f.values)
