"""Monte Carlo simulation of the regime-switching controlled diffusion.

In mode ``i`` under control ``theta`` the state moves by

    X <- X + b_theta,i(X) dt + sqrt(2 dt) sigma_i(X) xi,    xi ~ N(0, I)

and pays ``f_theta,i(X) dt``; after each step the mode flips with
probability ``dt``. For a fixed policy the expected total cost
``E[int f ds + u0_{mode(T)}(X_T)]`` is an upper bound for the value of the
coupled system, since the value is the infimum over controls.

Paths are simulated in fixed-size batches. Batch ``k`` draws from a Philox
generator keyed by ``(seed, k)``, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import UsageError
from .grid import PeriodicGrid, SystemField
from .model import ModelSpec

__all__ = [
    "FeedbackPolicy",
    "McConfig",
    "SwitchingPath",
    "McEstimate",
    "PolicyGap",
    "FlipTest",
    "simulate_path",
    "simulate_batch",
    "estimate_value",
    "policy_gap",
    "flip_count_test",
]


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Control label per (mode, grid node); positions are quantized to the nearest node."""

    grid: PeriodicGrid
    labels: tuple[tuple[str, ...], ...]

    def label_at(self, eq: int, x: np.ndarray) -> np.ndarray:
        idx = self.grid.nearest_node(x)
        return np.asarray(self.labels[eq], dtype=object)[idx]

    def __repr__(self):
        return f"FeedbackPolicy(n={self.grid.n_per_axis}, dim={self.grid.dim})"


@dataclass
class McConfig:
    samples: int = 10_000
    dt: float = 1e-3
    seed: int = 0
    policy: str | Sequence[str] | FeedbackPolicy | None = None
    batch_size: int = 1000
    threads: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise UsageError("samples must be >= 1")
        if not self.dt > 0:
            raise UsageError("dt must be positive")
        if self.dt >= 1:
            raise UsageError(f"dt={self.dt} >= 1 would make the flip probability exceed 1")
        if self.batch_size < 1 or self.threads < 1:
            raise UsageError("batch_size and threads must be >= 1")


def _policy_repr(policy) -> str | list:
    if policy is None or isinstance(policy, str):
        return policy
    if isinstance(policy, FeedbackPolicy):
        return repr(policy)
    return list(policy)


class _Dynamics:
    """Per-mode drift, cost and diffusion under a policy, evaluated on batches of positions."""

    def __init__(self, model: ModelSpec, policy):
        if not model.control_form:
            raise UsageError(f"model {model.name!r} is not in control form")
        self.model = model
        self.m = model.m
        self.options = [model.control_data(i) for i in range(self.m)]
        self.policy = policy
        if policy is None:
            for i, opts in enumerate(self.options):
                if len(opts) != 1:
                    raise UsageError(
                        f"equation {i} has {len(opts)} controls; give a policy or freeze one with with_policy"
                    )
            self.fixed = [0] * self.m
        elif isinstance(policy, FeedbackPolicy):
            if policy.grid.dim != model.dim or len(policy.labels) != self.m:
                raise UsageError("feedback policy does not match the model")
            self.fixed = None
        else:
            labels = [policy] * self.m if isinstance(policy, str) else list(policy)
            if len(labels) != self.m:
                raise UsageError(f"policy needs {self.m} labels, got {len(labels)}")
            self.fixed = [self._index(i, str(lab)) for i, lab in enumerate(labels)]

    def _index(self, eq, label):
        names = [o[0] for o in self.options[eq]]
        if label not in names:
            raise UsageError(f"control label {label!r} not available in equation {eq}: {names}")
        return names.index(label)

    def drift_cost(self, eq: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        opts = self.options[eq]
        if self.fixed is not None:
            _, b, f = opts[self.fixed[eq]]
            return b(x), f(x)
        labels = self.policy.label_at(eq, x)
        names = np.array([o[0] for o in opts], dtype=object)
        b = np.zeros(x.shape)
        f = np.zeros(len(x))
        for k, (name, bk, fk) in enumerate(opts):
            sel = labels == names[k]
            if np.any(sel):
                b[sel] = bk(x[sel])
                f[sel] = fk(x[sel])
        unknown = ~np.isin(labels, names)
        if np.any(unknown):
            raise UsageError(f"feedback policy uses unknown labels {set(labels[unknown])}")
        return b, f

    def sigma(self, eq: int, x: np.ndarray) -> np.ndarray:
        return self.model.diffusions[eq].sigma(x)


@dataclass
class _BatchResult:
    cost: np.ndarray
    x_final: np.ndarray
    mode_final: np.ndarray
    flips: np.ndarray
    path: dict | None = None


_PATH_STREAMS = 2**32  # single recorded paths use keys disjoint from batch indices


def _rng(seed: int, batch: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(batch)])))


def simulate_batch(dyn: _Dynamics, x0, i0: int, T: float, dt: float, n_paths: int, seed: int,
                   batch: int, record: bool = False) -> _BatchResult:
    dim = dyn.model.dim
    n_steps = int(round(T / dt))
    if not math.isclose(n_steps * dt, T, rel_tol=1e-9, abs_tol=1e-12):
        raise UsageError(f"horizon T={T} is not a multiple of dt={dt}")
    rng = _rng(seed, batch)
    x = np.tile(np.mod(np.asarray(x0, dtype=float).reshape(1, dim), 1.0), (n_paths, 1))
    mode = np.full(n_paths, int(i0))
    cost = np.zeros(n_paths)
    flips = np.zeros(n_paths, dtype=np.int64)
    sq = math.sqrt(2.0 * dt)
    rec = None
    if record:
        rec = {"x": [x.copy()], "mode": [mode.copy()], "cost": [cost.copy()]}
    for _ in range(n_steps):
        xi = rng.standard_normal((n_paths, dim))
        u = rng.random(n_paths)
        b = np.empty_like(x)
        f = np.empty(n_paths)
        noise = np.empty_like(x)
        for i in range(dyn.m):
            sel = mode == i
            if not np.any(sel):
                continue
            xs = x[sel]
            bi, fi = dyn.drift_cost(i, xs)
            b[sel] = bi
            f[sel] = fi
            noise[sel] = np.einsum("nkl,nl->nk", dyn.sigma(i, xs), xi[sel])
        cost += f * dt
        x = np.mod(x + b * dt + sq * noise, 1.0)
        if dyn.m > 1:
            flip = u < dt
            mode = np.where(flip, (mode + 1) % dyn.m, mode)
            flips += flip
        if record:
            rec["x"].append(x.copy())
            rec["mode"].append(mode.copy())
            rec["cost"].append(cost.copy())
    return _BatchResult(cost, x, mode, flips, rec)


@dataclass
class SwitchingPath:
    times: np.ndarray
    positions: np.ndarray
    modes: np.ndarray
    cost: np.ndarray

    @property
    def n_flips(self) -> int:
        return int(np.count_nonzero(np.diff(self.modes)))


def _check_start(model, x0, i0):
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (model.dim,):
        raise UsageError(f"x0 must have {model.dim} coordinates")
    if not 0 <= int(i0) < model.m:
        raise UsageError(f"initial mode {i0} out of range [0, {model.m})")
    return x0


def simulate_path(model: ModelSpec, x0, i0: int, mc: McConfig, T: float, path: int = 0) -> SwitchingPath:
    """One recorded path; ``path`` selects an independent stream."""
    x0 = _check_start(model, x0, i0)
    dyn = _Dynamics(model, mc.policy)
    res = simulate_batch(dyn, x0, i0, T, mc.dt, 1, mc.seed, _PATH_STREAMS + int(path), record=True)
    n = len(res.path["x"])
    return SwitchingPath(
        times=np.arange(n) * mc.dt,
        positions=np.concatenate(res.path["x"]),
        modes=np.concatenate(res.path["mode"]),
        cost=np.concatenate(res.path["cost"]),
    )


@dataclass
class McEstimate:
    mean: float
    stderr: float
    samples: int
    seed: int
    x0: list
    i0: int
    T: float
    policy: object
    dt: float
    flips: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"x0": self.x0, "i0": self.i0, "T": self.T, "policy": self.policy, "mean": self.mean,
                "stderr": self.stderr, "samples": self.samples, "seed": self.seed, "dt": self.dt}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _run(model, x0, i0, T, mc: McConfig, u0: SystemField | None):
    x0 = _check_start(model, x0, i0)
    dyn = _Dynamics(model, mc.policy)
    if u0 is None:
        u0 = model.initial_field(PeriodicGrid(model.dim, 256 if model.dim == 1 else 128))
    if u0.m != model.m:
        raise UsageError("terminal data has the wrong number of equations")
    sizes = [mc.batch_size] * (mc.samples // mc.batch_size)
    if mc.samples % mc.batch_size:
        sizes.append(mc.samples % mc.batch_size)

    def work(k):
        res = simulate_batch(dyn, x0, i0, T, mc.dt, sizes[k], mc.seed, k)
        terminal = np.empty(sizes[k])
        for i in range(model.m):
            sel = res.mode_final == i
            if np.any(sel):
                terminal[sel] = u0.grid.interpolate(u0.values[i], res.x_final[sel])
        return res.cost + terminal, res.flips

    if mc.threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=mc.threads) as ex:
            parts = list(ex.map(work, range(len(sizes))))
    else:
        parts = [work(k) for k in range(len(sizes))]
    values = np.concatenate([p[0] for p in parts])
    flips = np.concatenate([p[1] for p in parts])
    return x0, values, flips


def estimate_value(model: ModelSpec, x0, i0: int, T: float, mc: McConfig,
                   u0: SystemField | None = None) -> McEstimate:
    """Mean and standard error of the total cost of ``mc.policy`` started at ``(x0, i0)``.

    ``u0`` is the terminal cost (default: the model's initial data sampled
    on a fine grid), evaluated by periodic (bi)linear interpolation.
    """
    x0, values, flips = _run(model, x0, i0, T, mc, u0)
    n = len(values)
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    if np.ptp(values) == 0:
        stderr = 0.0
    return McEstimate(float(np.mean(values)), stderr, n, mc.seed, x0.tolist(), int(i0), float(T),
                      _policy_repr(mc.policy), mc.dt, flips)


@dataclass
class PolicyGap:
    rows: list[McEstimate]
    best: int
    pde_value: float | None
    allowance: float
    upper_bound_holds: bool | None

    @property
    def min_estimate(self) -> McEstimate:
        return self.rows[self.best]

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "best": self.best, "pde_value": self.pde_value,
                "allowance": self.allowance, "upper_bound_holds": self.upper_bound_holds}


def policy_gap(model: ModelSpec, x0, i0: int, T: float, policies: Sequence, mc: McConfig,
               u0: SystemField | None = None, pde_value: float | None = None,
               allowance: float = 2e-2) -> PolicyGap:
    """Estimate every policy; the smallest mean must not undercut the PDE value beyond the error budget."""
    if not policies:
        raise UsageError("need at least one policy")
    rows = []
    for pol in policies:
        cfg = McConfig(mc.samples, mc.dt, mc.seed, pol, mc.batch_size, mc.threads)
        rows.append(estimate_value(model, x0, i0, T, cfg, u0))
    best = int(np.argmin([r.mean for r in rows]))
    holds = None
    if pde_value is not None:
        b = rows[best]
        holds = bool(b.mean >= pde_value - 3 * b.stderr - allowance)
    return PolicyGap(rows, best, pde_value, allowance, holds)


@dataclass
class FlipTest:
    statistic: float
    dof: int
    pvalue: float
    passed: bool
    mean: float
    expected_mean: float


def flip_count_test(flips: np.ndarray, n_steps: int, dt: float, alpha: float = 0.01) -> FlipTest:
    """Chi-square goodness of fit of per-path flip counts against Binomial(n_steps, dt).

    Tail bins are merged until every expected count is at least 5.
    """
    flips = np.asarray(flips, dtype=int)
    n = len(flips)
    dist = stats.binom(n_steps, dt)
    kmax = int(max(flips.max(), dist.ppf(1 - 1e-12))) + 1
    ks = np.arange(kmax + 1)
    expected = n * dist.pmf(ks)
    expected[-1] += n * dist.sf(kmax)
    observed = np.bincount(flips, minlength=kmax + 1)[: kmax + 1].astype(float)
    # merge bins from both tails until each expected count reaches 5
    obs_b, exp_b = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= 5:
            obs_b.append(acc_o)
            exp_b.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and exp_b:
        obs_b[-1] += acc_o
        exp_b[-1] += acc_e
    obs_b, exp_b = np.array(obs_b), np.array(exp_b)
    stat = float(np.sum((obs_b - exp_b) ** 2 / exp_b))
    dof = len(obs_b) - 1
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return FlipTest(stat, dof, p, bool(p >= alpha), float(flips.mean()), n_steps * dt)
