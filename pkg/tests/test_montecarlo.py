import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hjbsys.errors import UsageError
from hjbsys.evolution import EvolutionConfig, evolve
from hjbsys.grid import PeriodicGrid, SystemField
from hjbsys.model import builtin, model_from_dict
from hjbsys.montecarlo import (
    FeedbackPolicy,
    McConfig,
    _run,
    estimate_value,
    flip_count_test,
    policy_gap,
    simulate_path,
)


def const(v):
    return {"kind": "const", "value": v}


def control_model(options, m=2, sigma=None, initial=None):
    eq = {"hamiltonian": {"sub": [{"kind": "control", "options": options}]}}
    if sigma is not None:
        eq["sigma"] = sigma
    return model_from_dict({
        "name": "mc_test",
        "equations": [eq] * m,
        "coupling": {"matrix": [[1.0, -1.0], [-1.0, 1.0]] if m == 2 else [[0.0]]},
        "initial": initial or [const(0.0)] * m,
    })


def option(label, b, f):
    return {"label": label, "drift": [b if isinstance(b, dict) else const(b)], "cost": f if isinstance(f, dict) else const(f)}


def test_frozen_state_without_drift_or_noise():
    m = control_model([option("0", 0.0, 0.0)])
    path = simulate_path(m, [0.3], 0, McConfig(dt=0.01), T=1.0)
    assert np.all(path.positions == 0.3)
    assert len(path.times) == 101


def test_constant_drift_integrates_exactly():
    m = control_model([option("1", 1.0, 0.0)], m=1)
    path = simulate_path(m, [0.7], 0, McConfig(dt=1e-3), T=0.5)
    assert path.positions[-1, 0] == pytest.approx(0.2, abs=1e-9)
    assert np.all((path.positions >= 0) & (path.positions < 1))


def test_flip_count_mean():
    m = control_model([option("0", 0.0, 0.0)])
    _, _, flips = _run(m, [0.1], 0, 10.0, McConfig(samples=1000, dt=0.01, seed=5), None)
    sd = math.sqrt(1000 * 0.01 * 0.99) / math.sqrt(1000)
    assert abs(flips.mean() - 10) <= 3 * sd


def test_constant_cost_exact():
    f0, K = 0.7, -1.25
    m = control_model([option("0", 0.3, f0)], sigma={"kind": "scalar", "scale": const(0.5)},
                      initial=[const(K), const(K)])
    est = estimate_value(m, [0.2], 1, 1.0, McConfig(samples=500, dt=1e-2, seed=2))
    assert est.mean == pytest.approx(f0 * 1.0 + K, abs=1e-12)
    assert est.stderr == 0


def test_switching_chain_average():
    m = control_model([option("0", 0.0, 0.0)], initial=[const(1.0), const(0.0)])
    dt, T = 1e-3, 1.0
    est = estimate_value(m, [0.5], 0, T, McConfig(samples=20000, dt=dt, seed=9))
    exact = 0.5 * (1 + (1 - 2 * dt) ** round(T / dt))
    assert abs(exact - 0.5 * (1 + math.exp(-2 * T))) < 1e-3
    assert abs(est.mean - exact) <= 4 * est.stderr


def test_config_validation():
    with pytest.raises(UsageError):
        McConfig(dt=1.0)
    with pytest.raises(UsageError):
        McConfig(samples=0)
    with pytest.raises(UsageError):
        estimate_value(builtin("control_pair"), [0.1], 0, 1.0, McConfig(samples=10))
    with pytest.raises(UsageError):
        estimate_value(builtin("asymmetric_pair"), [0.1], 0, 1.0, McConfig(samples=10))


@settings(max_examples=10)
@given(st.integers(0, 2**63 - 1), st.integers(2, 4), st.integers(50, 400))
def test_seed_determinism_and_thread_independence(seed, threads, batch):
    m = builtin("control_pair")
    base = McConfig(samples=900, dt=1e-2, seed=seed, policy=["-1", "+1.0"], batch_size=batch)
    a = _run(m, [0.4], 1, 0.5, base, None)
    b = _run(m, [0.4], 1, 0.5, base, None)
    c = _run(m, [0.4], 1, 0.5, McConfig(900, 1e-2, seed, ["-1", "+1.0"], batch, threads), None)
    for x, y in ((a, b), (a, c)):
        np.testing.assert_array_equal(x[1], y[1])
        np.testing.assert_array_equal(x[2], y[2])


def test_estimate_json():
    est = estimate_value(builtin("sublinear_drift"), [0.25], 0, 0.1, McConfig(samples=50, dt=1e-2, policy="+1"))
    d = json.loads(est.to_json())
    assert {"x0", "i0", "T", "policy", "mean", "stderr", "samples", "seed"} <= set(d)


def test_policy_gap_against_quadrature():
    # cost well at x = 1/2 under a deterministic flow
    cos = {"kind": "cos", "amp": 1.0}
    m = control_model([option("-1", -1.0, cos), option("+1", 1.0, cos)], m=1)
    x0, T = 0.25, 0.5
    mc = McConfig(samples=20, dt=1e-3, seed=0)
    gap = policy_gap(m, [x0], 0, T, ["-1", "+1"], mc)
    exact = {th: integrate.quad(lambda s: math.cos(2 * math.pi * (x0 + th * s)), 0, T)[0] for th in (-1, 1)}
    assert gap.rows[0].mean == pytest.approx(exact[-1], abs=5e-3)
    assert gap.rows[1].mean == pytest.approx(exact[1], abs=5e-3)
    assert gap.best == 1 and exact[-1] - exact[1] > 0.1


def test_policy_gap_single_and_monotone():
    m = builtin("control_pair")
    mc = McConfig(samples=400, dt=1e-2, seed=3)
    one = policy_gap(m, [0.3], 0, 0.5, [["+1", "+0.0"]], mc)
    direct = estimate_value(m, [0.3], 0, 0.5, McConfig(400, 1e-2, 3, ["+1", "+0.0"]))
    assert len(one.rows) == 1 and one.rows[0].mean == direct.mean
    more = policy_gap(m, [0.3], 0, 0.5, [["+1", "+0.0"], ["-1", "-1.0"], ["+1", "+1.0"]], mc)
    assert more.min_estimate.mean <= one.min_estimate.mean


@pytest.mark.parametrize("name, policies", [
    ("control_pair", [["+1", "+0.0"], ["-1", "-0.5"], ["+1", "+1.5"]]),
    ("sublinear_drift", [["+1"], ["-1"]]),
])
def test_upper_bound_property(name, policies):
    m = builtin(name)
    g = PeriodicGrid(1, 256)
    T = 0.5
    u0 = m.initial_field(g)
    pde = evolve(m, g, u0, EvolutionConfig(t_max=T)).final
    for x0 in (0.1, 0.3, 0.5, 0.7, 0.9):
        for i0 in range(m.m):
            value = float(g.interpolate(pde.values[i0], np.array([[x0]]))[0])
            gap = policy_gap(m, [x0], i0, T, policies, McConfig(samples=1000, dt=1e-2, seed=1), u0, value)
            assert gap.upper_bound_holds


def test_feedback_policy():
    m = builtin("sublinear_drift")
    g = PeriodicGrid(1, 64)
    labels = (tuple("+1" if x < 0.5 else "-1" for x in g.points[:, 0]),)
    pol = FeedbackPolicy(g, labels)
    est = estimate_value(m, [0.25], 0, 0.2, McConfig(samples=200, dt=1e-2, policy=pol))
    assert math.isfinite(est.mean)
    with pytest.raises(UsageError):
        estimate_value(m, [0.25], 0, 0.2, McConfig(samples=10, dt=1e-2, policy=FeedbackPolicy(g, (("x",) * 64,))))


def test_flip_chi_square():
    m = builtin("control_pair").with_policy(["+1", "+0.0"])
    _, _, flips = _run(m, [0.5], 0, 1.0, McConfig(samples=4000, dt=1e-2, seed=4), None)
    assert flip_count_test(flips, 100, 1e-2).passed
    assert not flip_count_test(flips, 100, 2e-2).passed


def test_path_modes_switch_on_steps():
    m = builtin("control_pair").with_policy(["+1", "+0.0"])
    path = simulate_path(m, [0.5], 1, McConfig(dt=1e-2, seed=8), T=5.0)
    assert path.modes[0] == 1
    assert set(np.unique(path.modes)) <= {0, 1}
    assert path.n_flips == np.count_nonzero(np.diff(path.modes))
    assert np.all(np.isfinite(path.cost))


def test_two_dimensional_paths():
    m = builtin("sublinear_drift", dim=2)
    est = estimate_value(m, [0.1, 0.9], 0, 0.2, McConfig(samples=100, dt=1e-2, policy="+1"),
                         m.initial_field(PeriodicGrid(2, 32)))
    assert math.isfinite(est.mean) and est.stderr > 0
