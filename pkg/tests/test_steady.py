import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hjbsys.errors import ErgodicInconsistencyError, NonConvergenceError
from hjbsys.grid import PeriodicGrid, SystemField
from hjbsys.model import available_models, builtin, constant_model, model_from_dict
from hjbsys.scheme import SpatialOperator
from hjbsys.steady import (
    DiscountedConfig,
    _rescaled_start,
    corrector_uniqueness_probe,
    discrete_residual,
    epsilon_sweep,
    refine_ergodic,
    solve_discounted,
    solve_ergodic,
)

G64 = PeriodicGrid(1, 64)


def twin_eikonal():
    eq = builtin("eikonal_cos").to_dict()["equations"][0]
    return model_from_dict({"name": "twin", "equations": [eq, eq]})


def test_residual_of_exact_constant_solution():
    m = constant_model(0.4)
    eps = 0.3
    phi = SystemField.constant(G64, 2, -0.4 / eps)
    r = discrete_residual(m, G64, phi, eps)
    assert np.all(r.values == 0)


def test_residual_coupling_vanishes_for_equal_components():
    m = twin_eikonal()
    x = G64.points[:, 0]
    u = np.sin(2 * math.pi * x)
    r = discrete_residual(m, G64, SystemField(G64, np.stack([u, u])), 0.1)
    single = discrete_residual(builtin("eikonal_cos"), G64, SystemField(G64, u[None]), 0.1)
    np.testing.assert_allclose(r.values[0], single.values[0], atol=1e-14)


def test_residual_linear_elliptic_second_order():
    eps = 0.5
    errs = []
    for n in (32, 64, 128):
        g = PeriodicGrid(1, n)
        x = g.points[:, 0]
        phi = np.cos(2 * math.pi * x) / (eps + 4 * math.pi**2)
        errs.append(np.abs(discrete_residual(builtin("linear_elliptic"), g, SystemField(g, phi[None]), eps).values).max())
    assert errs[-1] < 1e-3
    assert all(abs(math.log2(a / b) - 2) < 0.3 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("h0", [-1.3, 0.0, 0.7])
def test_discounted_constants_exact(h0):
    phi, rep = solve_discounted(constant_model(h0), G64, DiscountedConfig(epsilon=0.2))
    np.testing.assert_allclose(phi.values, -h0 / 0.2, rtol=1e-14, atol=1e-14)
    assert rep.osc == [0.0, 0.0]
    assert rep.sup_eps_phi[0] == pytest.approx(abs(h0))


def test_symmetric_pair_stays_symmetric():
    phi, rep = solve_discounted(twin_eikonal(), G64, DiscountedConfig(epsilon=0.1, residual_tol=1e-11))
    assert np.abs(phi.values[0] - phi.values[1]).max() <= 1e-10


def test_eikonal_bound():
    cfg = DiscountedConfig(epsilon=0.1)
    phi, rep = solve_discounted(builtin("eikonal_cos"), PeriodicGrid(1, 128), cfg)
    assert rep.h_max == pytest.approx(1.0)
    assert max(rep.sup_eps_phi) <= 1 + cfg.residual_tol
    assert rep.final_residual_sup <= cfg.residual_tol
    assert rep.pseudo_time_step <= rep.step_bound


def test_nonconvergence_carries_history():
    with pytest.raises(NonConvergenceError) as info:
        solve_discounted(builtin("eikonal_cos"), G64, DiscountedConfig(epsilon=0.01, max_iters=250))
    assert len(info.value.history) == 2


def test_warm_start_beats_cold_start():
    m = builtin("typical_superlinear")
    phi, _ = solve_discounted(m, G64, DiscountedConfig(epsilon=0.1))
    warm_start = _rescaled_start(phi, 0.1, 0.05)
    _, warm = solve_discounted(m, G64, DiscountedConfig(epsilon=0.05), initial=warm_start)
    _, cold = solve_discounted(m, G64, DiscountedConfig(epsilon=0.05))
    assert warm.iterations <= cold.iterations


def test_sweep_constants_are_flat(tmp_path):
    table, _ = epsilon_sweep(constant_model(0.5), G64, [0.5, 0.1, 0.02])
    assert all(r["osc"] == 0 and r["lipschitz"] == 0 for r in table.rows)
    path = table.to_csv(tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "epsilon,eq,osc,lipschitz,sup_eps_phi"
    assert len(lines) == 1 + 3 * 2


def test_sweep_eikonal_lipschitz_ratio():
    table, _ = epsilon_sweep(builtin("eikonal_cos"), PeriodicGrid(1, 128), [0.5, 0.1, 0.02, 0.004])
    lips = table.column("lipschitz", 0)
    assert lips.max() / lips.min() <= 1.2
    # explicit corrector: |v'| = sqrt(1 + cos 2 pi x) <= sqrt 2
    assert lips.max() <= math.sqrt(2) + 0.05


def test_ergodic_constants(tmp_path):
    sol = solve_ergodic(constant_model(0.6), G64)
    np.testing.assert_allclose(sol.c, [0.6, 0.6], atol=1e-12)
    assert np.all(sol.v.values == 0)
    paths = sol.save(tmp_path)
    assert [p.name for p in paths] == ["ergodic_v.csv", "ergodic.json", "ergodic_trace.csv"]
    assert (tmp_path / "ergodic_trace.csv").read_text().startswith("epsilon,eq,c_estimate\n")


def test_eikonal_explicit_corrector():
    g = PeriodicGrid(1, 128)
    sol = solve_ergodic(builtin("eikonal_cos"), g)
    x = g.points[:, 0]
    # v' = -sqrt(1 + cos) on (0, 1/2), +sqrt(1 + cos) on (1/2, 1), kink only at x = 0
    exact = -(math.sqrt(2) / math.pi) * np.abs(np.sin(math.pi * x))
    assert abs(sol.c_scalar - 1) <= 5e-2
    assert np.abs(sol.v.values[0] - exact).max() <= 2e-2
    assert sol.v.values[0, sol.anchor] == 0


def test_min_normalization():
    sol = solve_ergodic(builtin("eikonal_cos"), G64, mode="min")
    assert sol.v.values.min() == 0


def test_ergodic_residual_bound_and_refinement():
    sched = (0.1, 0.02, 0.004, 0.001)
    cfg = DiscountedConfig()
    sol = solve_ergodic(builtin("asymmetric_pair"), G64, sched, config=cfg)
    assert sol.residual_sup <= 10 * cfg.residual_tol + sched[-1]
    fine = refine_ergodic(builtin("asymmetric_pair"), G64, sol, tol=1e-10)
    assert fine.refined and fine.residual_sup <= 1e-10
    assert abs(fine.c_scalar - sol.c_scalar) <= 1e-3
    assert fine.v.values[0, fine.anchor] == 0


def test_decoupled_constants_disagree():
    d = builtin("asymmetric_pair").to_dict()
    d["coupling"] = {"matrix": [[0.0, 0.0], [0.0, 0.0]]}
    with pytest.raises(ErgodicInconsistencyError) as info:
        solve_ergodic(model_from_dict(d), PeriodicGrid(1, 32))
    assert info.value.invariant == "ergodic_constant_equal"


def test_uniqueness_probe_constants():
    assert corrector_uniqueness_probe(constant_model(0.3), G64) == 0


def test_uniqueness_probe_nonlip_reported():
    value = corrector_uniqueness_probe(builtin("nonlip_quad"), PeriodicGrid(1, 32))
    assert math.isfinite(value)


@given(st.sampled_from(available_models()), st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_damped_step_preserves_order(name, seed, eps):
    model = builtin(name)
    rng = np.random.default_rng(seed)
    g = PeriodicGrid(1, 32)
    w = rng.normal(size=(model.m, g.n_nodes))
    u = w + rng.exponential(size=w.shape) * (rng.random(w.shape) < 0.5)
    op = SpatialOperator(model, g, radius=float(rng.uniform(1, 20)))
    dtau = op.step_bound(eps)
    su = u - dtau * op.residual(u, eps)
    sw = w - dtau * op.residual(w, eps)
    assert np.all(su - sw >= -1e-12 * (1 + np.abs(su).max()))


@given(st.sampled_from(["asymmetric_pair", "control_pair", "typical_superlinear"]), st.integers(0, 1000))
def test_damped_step_preserves_order_2d(name, seed):
    model = builtin(name, dim=2)
    rng = np.random.default_rng(seed)
    g = PeriodicGrid(2, 8)
    w = rng.normal(size=(model.m, g.n_nodes))
    u = w + rng.exponential(size=w.shape)
    op = SpatialOperator(model, g, radius=10.0, scheme=rng.choice(["upwind", "lax_friedrichs"]))
    dtau = op.step_bound(0.1)
    assert np.all((u - dtau * op.residual(u, 0.1)) - (w - dtau * op.residual(w, 0.1)) >= -1e-12)


def test_two_dimensional_discounted_smoke():
    g = PeriodicGrid(2, 16)
    phi, rep = solve_discounted(builtin("asymmetric_pair", dim=2), g, DiscountedConfig(epsilon=0.5))
    # the 2D builtin varies along axis 0 only
    grid_vals = phi.values.reshape(2, 16, 16)
    assert np.abs(grid_vals - grid_vals[:, :, :1]).max() <= 1e-9
    one_d, _ = solve_discounted(builtin("asymmetric_pair"), PeriodicGrid(1, 16), DiscountedConfig(epsilon=0.5))
    np.testing.assert_allclose(grid_vals[:, :, 0], one_d.values, atol=1e-8)
