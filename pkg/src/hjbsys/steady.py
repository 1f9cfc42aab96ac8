"""Discounted stationary solves, epsilon sweeps and the vanishing-discount ergodic pair.

The discounted equation ``eps * phi + F[phi] = 0`` is solved by the damped
monotone iteration ``phi <- phi - dtau * (eps * phi + F[phi])``. For a vector
``k`` of per-equation constants ``F[phi + k] = F[phi] + D k`` exactly, so the
solver stores ``phi = kappa + w`` with offsets ``kappa`` (one per equation)
and a fluctuation ``w`` of zero mean in every equation, and after each damped
step solves the small system ``(eps I + D) dk = mean residual`` so the
residual has zero mean in every equation. Without this the constant modes
would relax at rate ``eps`` and small discounts would need
``O(1 / (eps * dtau))`` iterations.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DivergenceError,
    ErgodicInconsistencyError,
    NonConvergenceError,
    PropertyViolation,
    UsageError,
)
from .grid import PeriodicGrid, SystemField, discrete_lipschitz, discrete_osc, field_to_csv
from .model import CouplingMatrix, ModelSpec, coupling_analysis
from .scheme import SpatialOperator, auto_radius

__all__ = [
    "DiscountedConfig",
    "SolveReport",
    "SweepTable",
    "ErgodicSolution",
    "discrete_residual",
    "solve_discounted",
    "epsilon_sweep",
    "solve_ergodic",
    "refine_ergodic",
    "ergodic_residual",
    "corrector_uniqueness_probe",
    "h_max",
]


@dataclass
class DiscountedConfig:
    """Parameters of one discounted solve.

    ``pseudo_time_step=None`` uses ``cfl_safety`` times the monotonicity
    bound; ``truncation_radius=None`` picks four times the largest discrete
    Lipschitz constant of the starting field (at least 4) and doubles it
    whenever the converged solution reaches the radius.
    """

    epsilon: float = 0.1
    pseudo_time_step: float | None = None
    residual_tol: float = 1e-10
    max_iters: int = 500_000
    truncation_radius: float | None = None
    cfl_safety: float = 0.95
    scheme: str = "upwind"
    check_assumptions: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        if self.pseudo_time_step is not None and not self.pseudo_time_step > 0:
            raise UsageError("pseudo_time_step must be positive")
        if not self.residual_tol > 0:
            raise UsageError("residual_tol must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise UsageError("cfl_safety must lie in (0, 1]")


@dataclass
class SolveReport:
    epsilon: float
    iterations: int
    final_residual_sup: float
    osc: list[float]
    lipschitz: list[float]
    sup_eps_phi: list[float]
    h_max: float
    pseudo_time_step: float
    step_bound: float
    truncation_radius: float
    wall_time: float
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def h_max(model: ModelSpec, grid: PeriodicGrid) -> float:
    """``max_{j, x} |H_j(x, 0)|`` over the grid nodes."""
    return model.h_at_zero_max(grid.points)


def _check_finite(values: np.ndarray, what: str, t=None):
    if not np.all(np.isfinite(values)):
        flat = np.flatnonzero(~np.isfinite(values.reshape(-1)))[0]
        eq, node = np.unravel_index(flat, values.shape)[-2:]
        raise DivergenceError(
            f"{what}: non-finite value at eq={int(eq)}, node={int(node)}",
            node=(int(eq), int(node)),
            last_good_time=t,
        )


def discrete_residual(
    model: ModelSpec,
    grid: PeriodicGrid,
    field: SystemField,
    epsilon: float,
    truncation_radius: float | None = None,
    scheme: str = "upwind",
) -> SystemField:
    """Nodewise ``eps * u + F[u]``."""
    if field.m != model.m:
        raise UsageError(f"field has {field.m} equations, model has {model.m}")
    radius = truncation_radius if truncation_radius is not None else auto_radius([field])
    op = SpatialOperator(model, grid, radius, scheme)
    res = op.residual(field.values, epsilon)
    _check_finite(res, "discrete residual")
    return SystemField(grid, res)


class _ModeSolver:
    """Constant-mode correction: ``dk`` with ``(eps I + D) dk = rbar`` (``c`` absorbs the rest at eps=0)."""

    def __init__(self, D: np.ndarray, epsilon: float):
        m = D.shape[0]
        self.epsilon = epsilon
        if epsilon > 0:
            self.inv = np.linalg.inv(epsilon * np.eye(m) + D)
            return
        an = coupling_analysis(CouplingMatrix(D)) if m > 1 else None
        lam = an.Lambda if an is not None and an.Lambda is not None else np.ones(m)
        self.weights = lam / lam.sum()
        self.pinv = np.linalg.pinv(D) if m > 1 else np.zeros((1, 1))
        self.D = D

    def __call__(self, rbar: np.ndarray) -> tuple[np.ndarray, float]:
        if self.epsilon > 0:
            return self.inv @ rbar, 0.0
        c = float(self.weights @ rbar)
        return self.pinv @ (rbar - c), c


def _relax(op: SpatialOperator, kappa: np.ndarray, w: np.ndarray, epsilon: float, dtau: float,
           tol: float, max_iters: int, record_every: int = 100):
    """Damped iteration on ``phi = kappa + w`` with exact constant-mode correction.

    ``epsilon = 0`` is the relative value iteration for the ergodic problem:
    the residual is then driven to the constant ``c`` instead of zero.
    Returns ``(kappa, w, iterations, residual, history, c)``.
    """
    history = []
    modes = _ModeSolver(op.D, epsilon)
    D = op.D
    kappa = np.asarray(kappa, dtype=float).reshape(-1, 1) + w.mean(axis=1, keepdims=True)
    w = w - w.mean(axis=1, keepdims=True)

    def corrected(kappa, w):
        r = epsilon * (kappa + w) + op.apply(w) + D @ kappa
        if not np.isfinite(r).all():
            _check_finite(r, "pseudo-time iteration")
        dk, c = modes(r.mean(axis=1))
        kappa = kappa - dk[:, None]
        r = r - (epsilon * dk + D @ dk)[:, None] - c
        return kappa, r, c

    kappa, r, c = corrected(kappa, w)
    it = 0
    res = float(np.abs(r).max())
    while res > tol:
        if it >= max_iters:
            raise NonConvergenceError(
                f"no convergence after {max_iters} iterations (residual {res:.3e} > {tol:.1e})",
                history=history,
            )
        w = w - dtau * r
        shift = w.mean(axis=1, keepdims=True)
        w -= shift
        kappa = kappa + shift
        kappa, r, c = corrected(kappa, w)
        it += 1
        res = float(np.abs(r).max())
        if it % record_every == 0:
            history.append(res)
    return kappa, w, it, res, history, c


def solve_discounted(
    model: ModelSpec,
    grid: PeriodicGrid,
    config: DiscountedConfig | None = None,
    initial: SystemField | None = None,
) -> tuple[SystemField, SolveReport]:
    """Solve ``eps * phi + F[phi] = 0`` to ``config.residual_tol`` in sup norm."""
    config = config or DiscountedConfig()
    if initial is not None and initial.m != model.m:
        raise UsageError(f"initial field has {initial.m} equations, model has {model.m}")
    if config.check_assumptions:
        from .assumptions import lint

        result = lint(model)
        if not result.passed:
            failed = [r.hypothesis for r in result.reports if not r.passed]
            warnings.warn(f"model {model.name!r}: hypotheses not verified: {failed}", stacklevel=2)
    start = time.perf_counter()
    eps = float(config.epsilon)
    phi0 = initial.values if initial is not None else np.zeros((model.m, grid.n_nodes))
    kappa, w = np.zeros((model.m, 1)), phi0
    if config.truncation_radius is not None:
        radius = float(config.truncation_radius)
    else:
        radius = auto_radius([SystemField(grid, phi0)])
    total_iters, history = 0, []
    while True:
        op = SpatialOperator(model, grid, radius, config.scheme)
        bound = op.step_bound(eps)
        dtau = config.pseudo_time_step if config.pseudo_time_step is not None else config.cfl_safety * bound
        if dtau > bound * (1 + 1e-12):
            raise UsageError(f"pseudo_time_step {dtau:.3e} exceeds the monotonicity bound {bound:.3e}")
        kappa, w, iters, res, hist, _ = _relax(
            op, kappa, w, eps, dtau, config.residual_tol, config.max_iters - total_iters
        )
        total_iters += iters
        history += hist
        sol = SystemField(grid, kappa + w)
        lips = [discrete_lipschitz(sol, eq) for eq in range(model.m)]
        if config.truncation_radius is not None or max(lips) < radius:
            break
        radius *= 2.0
    hm = h_max(model, grid)
    sup_eps = [float(np.abs(eps * sol.values[i]).max()) for i in range(model.m)]
    report = SolveReport(
        epsilon=eps,
        iterations=total_iters,
        final_residual_sup=res,
        osc=[discrete_osc(sol, i) for i in range(model.m)],
        lipschitz=lips,
        sup_eps_phi=sup_eps,
        h_max=hm,
        pseudo_time_step=float(dtau),
        step_bound=float(bound),
        truncation_radius=radius,
        wall_time=time.perf_counter() - start,
        history=history,
    )
    if max(sup_eps) > hm + config.residual_tol + 1e-9 * max(1.0, hm):
        raise PropertyViolation(
            "eps_phi_bound",
            f"sup|eps*phi|={max(sup_eps):.6g} exceeds max|H(x,0)|={hm:.6g} + tol",
        )
    return sol, report


def _rescaled_start(phi: SystemField, eps_old: float, eps_new: float) -> SystemField:
    """Warm start for a new discount: keep the fluctuation, rescale the mean so ``eps * phi`` is unchanged."""
    mean = phi.values.mean()
    return SystemField(phi.grid, phi.values - mean + mean * eps_old / eps_new)


@dataclass
class SweepTable:
    rows: list[dict]
    uniform: dict[str, bool]
    reports: list[SolveReport]
    ratio_bound: float
    trend_bound: float

    def column(self, key: str, eq: int) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["eq"] == eq])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("epsilon,eq,osc,lipschitz,sup_eps_phi\n")
            for r in self.rows:
                fh.write(f"{r['epsilon']!r},{r['eq']},{r['osc']!r},{r['lipschitz']!r},{r['sup_eps_phi']!r}\n")
        return path


def _ratio(vals: np.ndarray) -> float:
    lo, hi = float(np.min(vals)), float(np.max(vals))
    if hi == 0:
        return 1.0
    return math.inf if lo == 0 else hi / lo


def epsilon_sweep(
    model: ModelSpec,
    grid: PeriodicGrid,
    epsilons: Sequence[float],
    config: DiscountedConfig | None = None,
    ratio_bound: float = 1.5,
    trend_bound: float = 1.2,
    initial: SystemField | None = None,
    anchor: int = 0,
) -> tuple[SweepTable, SystemField]:
    """Solve along a descending discount schedule with warm starts.

    A diagnostic is flagged uniform when its max/min ratio over the sweep is
    at most ``ratio_bound`` and its last value is at most ``trend_bound``
    times its first.
    """
    eps_list = [float(e) for e in epsilons]
    if not eps_list or any(e <= 0 for e in eps_list) or any(a <= b for a, b in zip(eps_list, eps_list[1:])):
        raise UsageError(f"epsilons must be positive and strictly descending, got {eps_list}")
    config = config or DiscountedConfig()
    rows, reports = [], []
    phi, prev = initial, None
    for eps in eps_list:
        cfg = DiscountedConfig(**{**asdict(config), "epsilon": eps})
        start = _rescaled_start(phi, prev, eps) if phi is not None and prev is not None else phi
        try:
            phi, rep = solve_discounted(model, grid, cfg, initial=start)
        except (NonConvergenceError, DivergenceError) as exc:
            exc.args = (f"epsilon={eps}: {exc.args[0]}",) + exc.args[1:]
            raise
        prev = eps
        reports.append(rep)
        for i in range(model.m):
            rows.append(
                {"epsilon": eps, "eq": i, "osc": rep.osc[i], "lipschitz": rep.lipschitz[i],
                 "sup_eps_phi": rep.sup_eps_phi[i], "iterations": rep.iterations,
                 "eps_phi_anchor": float(eps * phi.values[i, anchor])}
            )
    uniform = {}
    for i in range(model.m):
        for key in ("osc", "lipschitz"):
            vals = np.array([r[key] for r in rows if r["eq"] == i])
            ok_ratio = _ratio(vals) <= ratio_bound
            ok_trend = vals[-1] <= trend_bound * vals[0] or vals[0] == vals[-1]
            uniform[f"{key}_{i}"] = bool(ok_ratio and ok_trend)
    table = SweepTable(rows, uniform, reports, ratio_bound, trend_bound)
    return table, phi


@dataclass
class ErgodicSolution:
    """Vanishing-discount ergodic pair.

    ``v`` is ``phi`` at the smallest discount minus the common constant
    ``phi_0(x*)``, so ``v_0(x*) = 0`` in anchor mode (or ``min v = 0`` in
    min mode) and the coupling term keeps its form. ``rho[i]`` is
    ``phi_i(x*) - phi_{i+1}(x*)``.
    """

    c: np.ndarray
    c_per_equation: np.ndarray
    v: SystemField
    rho: np.ndarray
    anchor: int
    mode: str
    residual_sup: float
    epsilon_trace: list[dict]
    truncation_radius: float
    refined: bool = False

    @property
    def c_scalar(self) -> float:
        return float(np.mean(self.c))

    def header(self) -> dict:
        return {
            "c": [float(v) for v in self.c],
            "c_per_equation": [float(v) for v in self.c_per_equation],
            "rho": [float(v) for v in self.rho],
            "anchor": int(self.anchor),
            "anchor_x": [float(v) for v in self.v.grid.points[self.anchor]],
            "mode": self.mode,
            "residual_sup": float(self.residual_sup),
            "refined": self.refined,
            "truncation_radius": self.truncation_radius,
        }

    def save(self, directory, stem: str = "ergodic") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = field_to_csv(self.v, directory / f"{stem}_v.csv")
        json_path = directory / f"{stem}.json"
        json_path.write_text(json.dumps(self.header(), indent=2, sort_keys=True) + "\n")
        trace_path = directory / f"{stem}_trace.csv"
        with trace_path.open("w") as fh:
            fh.write("epsilon,eq,c_estimate\n")
            for r in self.epsilon_trace:
                fh.write(f"{r['epsilon']!r},{r['eq']},{r['c_estimate']!r}\n")
        return [csv_path, json_path, trace_path]


def ergodic_residual(
    model: ModelSpec, grid: PeriodicGrid, v: SystemField, c, radius: float, scheme: str = "upwind"
) -> float:
    """``sup_{i, x} |F_i[v](x) - c_i|``."""
    op = SpatialOperator(model, grid, radius, scheme)
    c = np.broadcast_to(np.asarray(c, dtype=float), (model.m,))
    return float(np.abs(op.apply(v.values) - c[:, None]).max())


def _normalize(phi: np.ndarray, anchor: int, mode: str) -> np.ndarray:
    ref = phi.min() if mode == "min" else phi[0, anchor]
    return phi - ref


DEFAULT_SCHEDULE = (0.1, 0.02, 0.004, 0.001)


def solve_ergodic(
    model: ModelSpec,
    grid: PeriodicGrid,
    epsilon_schedule: Sequence[float] = DEFAULT_SCHEDULE,
    anchor: int = 0,
    mode: str = "anchor",
    config: DiscountedConfig | None = None,
    ergodic_tol: float = 1e-3,
    initial: SystemField | None = None,
    refine: bool = False,
) -> ErgodicSolution:
    """Vanishing-discount extraction of ``(c, v)``.

    ``c_i = -eps * phi_i(x*)`` is extrapolated linearly in ``eps`` from the
    last two schedule points; each equation is extrapolated on its own and
    the results must agree within ``ergodic_tol``.
    """
    if mode not in ("anchor", "min"):
        raise UsageError(f"mode must be 'anchor' or 'min', got {mode!r}")
    grid._check_node(anchor)
    schedule = [float(e) for e in epsilon_schedule]
    if len(schedule) < 2:
        raise UsageError("epsilon schedule needs at least two values")
    table, phi = epsilon_sweep(model, grid, schedule, config, initial=initial, anchor=anchor)
    trace = []
    estimates = {}
    for r in table.rows:
        est = -r["eps_phi_anchor"]
        estimates.setdefault(r["epsilon"], np.zeros(model.m))[r["eq"]] = est
        trace.append({"epsilon": r["epsilon"], "eq": r["eq"], "c_estimate": est,
                      "osc": r["osc"], "lipschitz": r["lipschitz"]})
    e1, e2 = schedule[-2], schedule[-1]
    c1, c2 = estimates[e1], estimates[e2]
    c_per = (e1 * c2 - e2 * c1) / (e1 - e2)
    spread = float(np.max(c_per) - np.min(c_per))
    if spread > ergodic_tol:
        raise ErgodicInconsistencyError(
            f"model {model.name!r}: per-equation ergodic constants {c_per.tolist()} differ by {spread:.3e}"
        )
    c = np.full(model.m, float(np.mean(c_per)))
    v = SystemField(grid, _normalize(phi.values, anchor, mode))
    rho = np.array([phi.values[i, anchor] - phi.values[i + 1, anchor] for i in range(model.m - 1)])
    radius = table.reports[-1].truncation_radius
    sol = ErgodicSolution(
        c=c,
        c_per_equation=np.asarray(c_per, dtype=float),
        v=v,
        rho=rho,
        anchor=anchor,
        mode=mode,
        residual_sup=ergodic_residual(model, grid, v, c, radius, (config or DiscountedConfig()).scheme),
        epsilon_trace=trace,
        truncation_radius=radius,
    )
    return refine_ergodic(model, grid, sol) if refine else sol


def refine_ergodic(
    model: ModelSpec,
    grid: PeriodicGrid,
    sol: ErgodicSolution,
    tol: float = 1e-9,
    max_iters: int = 2_000_000,
    scheme: str = "upwind",
) -> ErgodicSolution:
    """Relative value iteration from ``sol`` until ``sup |F[v] - c| <= tol``.

    The result solves the discrete ergodic system to ``tol``; the
    vanishing-discount pair only does so to ``O(eps_min)``.
    """
    op = SpatialOperator(model, grid, sol.truncation_radius, scheme)
    dtau = 0.95 * op.step_bound(0.0)
    kappa, w, _, _, _, c_val = _relax(op, np.zeros(model.m), sol.v.values, 0.0, dtau, tol, max_iters)
    v = SystemField(grid, _normalize(kappa + w, sol.anchor, sol.mode))
    residual = float(np.abs(op.apply(v.values) - c_val).max())
    return ErgodicSolution(
        c=np.full(model.m, c_val),
        c_per_equation=sol.c_per_equation,
        v=v,
        rho=sol.rho,
        anchor=sol.anchor,
        mode=sol.mode,
        residual_sup=residual,
        epsilon_trace=sol.epsilon_trace,
        truncation_radius=sol.truncation_radius,
        refined=True,
    )


def corrector_uniqueness_probe(
    model: ModelSpec,
    grid: PeriodicGrid,
    anchors: tuple[int, int] = (0, None),
    epsilon_schedule: Sequence[float] = DEFAULT_SCHEDULE,
    config: DiscountedConfig | None = None,
) -> float:
    """``sup_{i,x} |(v^a - v^b) - mean(v^a - v^b)|`` for two independent ergodic solves.

    The second solve uses a different anchor and a shifted discount
    schedule (same final value), so the two runs follow different iterates.
    """
    a, b = anchors
    if b is None:
        b = grid.n_nodes // 3
    sched = [float(e) for e in epsilon_schedule]
    sched_b = [e * 1.3 for e in sched[:-1]] + [sched[-1]]
    sol_a = solve_ergodic(model, grid, sched, anchor=a, config=config)
    sol_b = solve_ergodic(model, grid, sched_b, anchor=b, config=config)
    diff = sol_a.v.values - sol_b.v.values
    return float(np.abs(diff - diff.mean()).max())
