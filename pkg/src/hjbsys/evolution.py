"""Explicit monotone time stepping of the Cauchy system and large-time diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DivergenceError, PreconditionError, PropertyViolation, UsageError
from .grid import PeriodicGrid, SystemField, discrete_lipschitz
from .model import CouplingMatrix, HamiltonianSpec, ModelSpec, Power, XFunction
from .scheme import SpatialOperator, auto_radius
from .steady import ErgodicSolution, refine_ergodic

__all__ = [
    "EvolutionConfig",
    "Evolution",
    "LongTimeReport",
    "SmpConfig",
    "SmpResult",
    "step",
    "evolve",
    "evolve_batch",
    "long_time_report",
    "linearized_system",
    "smp_probe",
]


@dataclass
class EvolutionConfig:
    """Time-stepping parameters; ``dt=None`` means ``cfl_safety`` times the monotone bound."""

    t_max: float = 1.0
    dt: float | None = None
    cfl_safety: float = 0.9
    snapshot_stride: int | None = None
    truncation_radius: float | None = None
    scheme: str = "upwind"
    gradient_tol: float = 0.05

    def __post_init__(self):
        if not self.t_max >= 0:
            raise UsageError("t_max must be nonnegative")
        if self.dt is not None and not self.dt > 0:
            raise UsageError("dt must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise UsageError("cfl_safety must lie in (0, 1]")
        if self.snapshot_stride is not None and self.snapshot_stride < 1:
            raise UsageError("snapshot_stride must be >= 1")


def _operator(model, grid, values, radius, scheme):
    if radius is None:
        flat = values.reshape(-1, values.shape[-1])
        radius = auto_radius([SystemField(grid, flat)])
    return SpatialOperator(model, grid, radius, scheme)


def _time_grid(op: SpatialOperator, config: EvolutionConfig) -> tuple[float, int, int]:
    bound = op.step_bound(0.0)
    dt = config.dt if config.dt is not None else config.cfl_safety * bound
    if dt > bound * (1 + 1e-12):
        raise PreconditionError(f"dt={dt:.3e} exceeds the monotone step bound {bound:.3e}")
    if not math.isfinite(dt):
        dt = config.t_max if config.t_max > 0 else 1.0
    n_steps = int(math.ceil(config.t_max / dt - 1e-9)) if config.t_max > 0 else 0
    if n_steps:
        dt = config.t_max / n_steps
    stride = config.snapshot_stride or max(1, n_steps // 200)
    return dt, n_steps, stride


def step(
    model: ModelSpec,
    grid: PeriodicGrid,
    u: SystemField,
    dt: float,
    truncation_radius: float | None = None,
    scheme: str = "upwind",
) -> SystemField:
    """One explicit Euler step ``u - dt * F[u]``; rejects ``dt`` above the monotone bound."""
    if u.m != model.m:
        raise UsageError(f"field has {u.m} equations, model has {model.m}")
    op = _operator(model, grid, u.values, truncation_radius, scheme)
    bound = op.step_bound(0.0)
    if not dt > 0 or dt > bound * (1 + 1e-12):
        raise PreconditionError(f"dt={dt:.3e} outside (0, {bound:.3e}] (monotone step bound)")
    new = u.values - dt * op.apply(u.values)
    if not np.all(np.isfinite(new)):
        raise DivergenceError("non-finite values after one step", last_good_time=0.0)
    return SystemField(grid, new)


@dataclass
class Evolution:
    times: np.ndarray
    snapshots: np.ndarray  # (n_snap, ..., m, n_nodes)
    lipschitz: np.ndarray  # (n_snap, ..., m)
    dt: float
    n_steps: int
    truncation_radius: float
    gradient_bounded: bool
    grid: PeriodicGrid

    def field(self, k: int = -1) -> SystemField:
        return SystemField(self.grid, self.snapshots[k])

    @property
    def final(self) -> SystemField:
        return self.field(-1)


def _lipschitz_batch(op: SpatialOperator, values: np.ndarray) -> np.ndarray:
    _, fwd = op.differences(values)
    return np.abs(fwd).max(axis=(-1, -2))


def _march(op, values, dt, n_steps, stride, shift=None, on_step=None):
    times, snaps, lips = [0.0], [values.copy()], [_lipschitz_batch(op, values)]
    u = values.copy()
    for k in range(1, n_steps + 1):
        rate = op.apply(u)
        if shift is not None:
            rate -= shift
        u = u - dt * rate
        if on_step is not None:
            on_step(k, u)
        if k % stride == 0 or k == n_steps:
            if not np.all(np.isfinite(u)):
                flat = int(np.flatnonzero(~np.isfinite(u.reshape(-1)))[0])
                raise DivergenceError(
                    f"non-finite values at step {k}",
                    node=int(np.unravel_index(flat, u.shape)[-1]),
                    last_good_time=times[-1],
                )
            times.append(k * dt)
            snaps.append(u.copy())
            lips.append(_lipschitz_batch(op, u))
    return np.array(times), np.stack(snaps), np.stack(lips)


def _gradient_bounded(lips: np.ndarray, tol: float) -> bool:
    """No growth trend: the later half never exceeds the earlier half by more than ``tol``."""
    if not np.all(np.isfinite(lips)):
        return False
    half = max(1, len(lips) // 2)
    early = lips[:half].max(axis=0)
    late = lips[half:].max(axis=0) if len(lips) > half else early
    return bool(np.all(late <= (1 + tol) * early + 1e-12))


def evolve_batch(
    model: ModelSpec, grid: PeriodicGrid, values: np.ndarray, config: EvolutionConfig | None = None
) -> Evolution:
    """Evolve one or many initial fields in lockstep; ``values`` has shape ``(..., m, n_nodes)``.

    With an automatic radius the run is repeated with a doubled radius
    whenever a snapshot reaches the truncation radius.
    """
    config = config or EvolutionConfig()
    values = np.asarray(values, dtype=float)
    if values.shape[-2:] != (model.m, grid.n_nodes):
        raise UsageError(f"initial values shape {values.shape} does not match (m, n_nodes)")
    if not np.all(np.isfinite(values)):
        raise UsageError("initial data must be finite")
    radius = config.truncation_radius
    op = _operator(model, grid, values, radius, config.scheme)
    while True:
        dt, n_steps, stride = _time_grid(op, config)
        times, snaps, lips = _march(op, values, dt, n_steps, stride)
        if config.truncation_radius is not None or lips.max() < op.radius:
            break
        op = SpatialOperator(model, grid, 2 * op.radius, config.scheme)
    return Evolution(
        times=times,
        snapshots=snaps,
        lipschitz=lips,
        dt=dt,
        n_steps=n_steps,
        truncation_radius=op.radius,
        gradient_bounded=_gradient_bounded(lips, config.gradient_tol),
        grid=grid,
    )


def evolve(
    model: ModelSpec, grid: PeriodicGrid, u0: SystemField | None = None, config: EvolutionConfig | None = None
) -> Evolution:
    """Evolve ``u0`` (default: the model's initial data) up to ``config.t_max``."""
    u0 = u0 if u0 is not None else model.initial_field(grid)
    if u0.m != model.m:
        raise UsageError(f"initial field has {u0.m} equations, model has {model.m}")
    return evolve_batch(model, grid, u0.values, config)


@dataclass
class LongTimeReport:
    """Convergence diagnostics of ``U = u + c t`` towards ``v + ell``.

    ``m_of_t = max_{i,x} (U - v)``, ``ell_hat = m_of_t`` and
    ``distance = sup |U - v - ell_hat|``.
    """

    times: np.ndarray
    m_of_t: np.ndarray
    ell_hat: np.ndarray
    distance: np.ndarray
    lipschitz: np.ndarray
    converged: bool
    final_d: float
    max_step_increase: float
    c: float
    dt: float
    truncation_radius: float
    ergodic_residual: float
    final: SystemField | None = None

    @property
    def m_nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.m_of_t) <= 1e-8))

    def to_csv(self, path) -> Path:
        path = Path(path)
        m = self.lipschitz.shape[1]
        with path.open("w") as fh:
            fh.write("t,m,ell_hat,d," + ",".join(f"lipschitz_{i + 1}" for i in range(m)) + "\n")
            for k in range(len(self.times)):
                vals = [self.times[k], self.m_of_t[k], self.ell_hat[k], self.distance[k], *self.lipschitz[k]]
                fh.write(",".join(repr(float(v)) for v in vals) + "\n")
        return path

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "final_d": self.final_d,
            "ell_hat": float(self.ell_hat[-1]),
            "max_step_increase": self.max_step_increase,
            "m_nonincreasing": self.m_nonincreasing,
            "c": self.c,
            "dt": self.dt,
            "truncation_radius": self.truncation_radius,
            "ergodic_residual": self.ergodic_residual,
        }


def long_time_report(
    model: ModelSpec,
    grid: PeriodicGrid,
    u0: SystemField | None,
    ergodic: ErgodicSolution,
    config: EvolutionConfig | None = None,
    tol: float = 1e-2,
    monotone_tol: float = 1e-8,
    refine_threshold: float = 1e-8,
    enforce_hypothesis: bool = True,
) -> LongTimeReport:
    """Evolve ``U = u + c t`` and track ``m(t)`` and the distance to ``v + m(t)``.

    The ergodic pair is first refined by relative value iteration when its
    residual exceeds ``refine_threshold``; ``m(t)`` can only creep upwards by
    ``dt`` times that residual per step. An increase above ``monotone_tol``
    in any single step raises :class:`PropertyViolation`.
    """
    if enforce_hypothesis and not model.convergence_supported:
        raise PreconditionError(f"model {model.name!r} is not flagged convergence_supported")
    config = config or EvolutionConfig(t_max=20.0)
    u0 = u0 if u0 is not None else model.initial_field(grid)
    if ergodic.residual_sup > refine_threshold:
        ergodic = refine_ergodic(model, grid, ergodic, tol=min(1e-9, refine_threshold / 10))
    v = ergodic.v.values
    c = ergodic.c[:, None]
    radius = config.truncation_radius
    if radius is None:
        radius = max(auto_radius([u0, ergodic.v]), ergodic.truncation_radius)
    op = SpatialOperator(model, grid, radius, config.scheme)
    dt, n_steps, stride = _time_grid(op, config)

    state = {"m": float((u0.values - v).max()), "worst": -np.inf}

    def watch(k, u):
        m_new = float((u - v).max())
        inc = m_new - state["m"]
        state["worst"] = max(state["worst"], inc)
        if inc > monotone_tol:
            raise PropertyViolation(
                "m_nonincreasing",
                f"max(u + c t - v) increased by {inc:.3e} at t={k * dt:.6g} (tolerance {monotone_tol:.1e})",
            )
        state["m"] = m_new

    times, snaps, lips = _march(op, u0.values, dt, n_steps, stride, shift=c, on_step=watch)
    if lips.max() >= op.radius and config.truncation_radius is None:
        return long_time_report(
            model, grid, u0, ergodic, replace(config, truncation_radius=2 * op.radius),
            tol, monotone_tol, refine_threshold, enforce_hypothesis,
        )
    diff = snaps - v
    m_of_t = diff.max(axis=(-1, -2))
    dist = np.abs(diff - m_of_t[:, None, None]).max(axis=(-1, -2))
    final_d = float(dist[-1])
    return LongTimeReport(
        times=times,
        m_of_t=m_of_t,
        ell_hat=m_of_t.copy(),
        distance=dist,
        lipschitz=lips,
        converged=bool(final_d <= tol and np.all(np.diff(m_of_t) <= monotone_tol)),
        final_d=final_d,
        max_step_increase=float(state["worst"]) if n_steps else 0.0,
        c=float(ergodic.c_scalar),
        dt=dt,
        truncation_radius=op.radius,
        ergodic_residual=float(ergodic.residual_sup),
        final=SystemField(grid, snaps[-1]),
    )


def linearized_system(model: ModelSpec, C: float = 1.0, coupling: CouplingMatrix | None = None) -> ModelSpec:
    """Same diffusions, every Hamiltonian replaced by ``-C |p|``."""
    if C < 0:
        raise UsageError("C must be nonnegative")
    ham = HamiltonianSpec(sup=(Power(XFunction("const", offset=-float(C)), 1.0),))
    return replace(
        model,
        name=f"{model.name}_linearized",
        hamiltonians=(ham,) * model.m,
        coupling=coupling if coupling is not None else model.coupling,
        convergence_supported=False,
        truncation=None,
    )


@dataclass
class SmpConfig:
    t_max: float = 30.0
    flat_tol: float = 1e-3
    dt: float | None = None
    cfl_safety: float = 0.9
    enforce_hypothesis: bool = True


@dataclass
class SmpResult:
    flat: bool
    final_range: float
    max_nonincreasing: bool
    times: np.ndarray = field(repr=False)
    max_series: np.ndarray = field(repr=False)
    range_series: np.ndarray = field(repr=False)


def _is_linearized(model: ModelSpec) -> bool:
    for h in model.hamiltonians:
        terms = h.terms
        if not terms:
            continue
        if len(terms) != 1 or not isinstance(terms[0], Power):
            return False
        t = terms[0]
        if t.exponent != 1.0 or t.coef.kind != "const" or t.coef.offset > 0:
            return False
    return True


def smp_probe(
    model_linearized: ModelSpec, grid: PeriodicGrid, u0: SystemField, config: SmpConfig | None = None
) -> SmpResult:
    """Evolve the linearized system and test whether the solution flattens to a constant."""
    from .assumptions import check_partition

    config = config or SmpConfig()
    if not _is_linearized(model_linearized):
        raise PreconditionError("smp_probe needs Hamiltonians of the form -C|p|")
    if config.enforce_hypothesis:
        rep = check_partition(model_linearized, grid)
        if not rep.passed:
            raise PreconditionError(
                f"partition of ellipticity fails (min sum of nu_i = {rep.worst_margin:.3g})"
            )
    ecfg = EvolutionConfig(t_max=config.t_max, dt=config.dt, cfl_safety=config.cfl_safety)
    ev = evolve(model_linearized, grid, u0, ecfg)
    maxes = ev.snapshots.max(axis=(-1, -2))
    ranges = maxes - ev.snapshots.min(axis=(-1, -2))
    mono = bool(np.all(np.diff(maxes) <= 1e-12))
    final_range = float(ranges[-1])
    return SmpResult(
        flat=bool(final_range <= config.flat_tol and mono),
        final_range=final_range,
        max_nonincreasing=mono,
        times=ev.times,
        max_series=maxes,
        range_series=ranges,
    )
