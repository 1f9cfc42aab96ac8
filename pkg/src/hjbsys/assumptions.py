"""Sampled checks of the structural hypotheses on Hamiltonians, diffusions and coupling.

Every check returns an :class:`AssumptionReport` whose ``worst_margin`` is
the minimum of a margin function over the samples; ``passed`` means no
counterexample was found, not that the hypothesis is proved. Samples mix a
deterministic lattice with random draws. The random draws come from
independent child streams of one seed (one stream each for ``x``, ``p``
and ``mu``), so the first ``k`` samples of a larger run coincide with a
smaller run and adding samples can only lower the worst margin.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .grid import PeriodicGrid
from .model import ModelSpec, coupling_analysis

__all__ = [
    "AssumptionReport",
    "LintResult",
    "check_sublinear",
    "check_superlinear_elliptic",
    "check_superlinear_degenerate",
    "check_ssa4",
    "check_partition",
    "check_ellipticity",
    "check_diffusion_regularity",
    "check_local_lipschitz",
    "lint",
]


@dataclass
class AssumptionReport:
    hypothesis: str
    passed: bool
    worst_margin: float
    witness: dict
    seed: int | None
    samples: dict
    eq: int | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "witness": self.witness,
            "seed": self.seed,
            "samples": self.samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _listify(v):
    if v is None:
        return None
    a = np.asarray(v, dtype=float)
    return a.tolist() if a.ndim else float(a)


# margins this close to zero are rounding noise around an equality case
ROUNDING = 1e-10


def _report(name, margins, x, y, p, mu, eq, seed, samples, note="") -> AssumptionReport:
    margins = np.where(np.abs(margins) <= ROUNDING, 0.0, margins)
    k = int(np.argmin(margins))
    worst = float(margins[k])
    if worst == 0.0 and name not in ("partition", "ellipticity"):
        note = f"boundary case, equality attained; {note}"
    witness = {
        "x": _listify(x[k]) if x is not None else None,
        "y": _listify(y[k]) if y is not None else None,
        "p": _listify(p[k]) if p is not None else None,
        "mu": _listify(mu[k]) if mu is not None else None,
        "eq": eq,
    }
    text = f"no counterexample found; {note}" if worst >= 0 else note
    return AssumptionReport(name, bool(worst >= 0), worst, witness, seed, samples, eq, text)


def _streams(seed: int, k: int = 6):
    """One independent generator per sampled quantity."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(k)]


def _unit_vectors(rng, n, dim):
    g = rng.standard_normal((n, dim))
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return g / norm


def _lattice_x(dim, n_axis):
    ax = np.arange(n_axis) / n_axis
    return np.stack([g.ravel() for g in np.meshgrid(*([ax] * dim), indexing="ij")], axis=-1)


def _lattice_dirs(dim, count=8):
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    ang = 2 * np.pi * np.arange(count) / count
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _check_eq(model, eq):
    if not 0 <= eq < model.m:
        raise UsageError(f"equation index {eq} out of range [0, {model.m})")


def _h_at_zero(model: ModelSpec, which: str, eq=None, n_axis: int = 256) -> float:
    x = _lattice_x(model.dim, n_axis if model.dim == 1 else 64)
    p0 = np.zeros_like(x)
    eqs = range(model.m) if eq is None else [eq]
    fn = {"full": lambda i: model.h_sub(i, x, p0) + model.h_super(i, x, p0),
          "super": lambda i: model.h_super(i, x, p0)}[which]
    return float(max(np.abs(fn(i)).max() for i in eqs))


def _constant(model, eq, name, given):
    if given is not None:
        return float(given)
    val = getattr(model.hamiltonians[eq].constants, name)
    if val is None:
        raise UsageError(f"model {model.name!r} eq {eq} declares no {name}; pass it explicitly")
    return float(val)


def check_sublinear(model: ModelSpec, eq: int, C: float | None = None, R: float = 10.0,
                    samples: int = 4000, seed: int = 0) -> AssumptionReport:
    """Margin ``C (1 + |p|) - |h_sub(x, p)|`` over ``|p| <= R``."""
    _check_eq(model, eq)
    C = _constant(model, eq, "C_sub", C)
    if C < 0 or R <= 0:
        raise UsageError("need C >= 0 and R > 0")
    d = model.dim
    rx, rp, rr, *_ = _streams(seed)
    xs_l = _lattice_x(d, 32 if d == 1 else 8)
    radii = np.linspace(0.0, R, 11)
    dirs = _lattice_dirs(d)
    pl = (radii[:, None, None] * dirs[None]).reshape(-1, d)
    xl = np.repeat(xs_l, len(pl), axis=0)
    pl = np.tile(pl, (len(xs_l), 1))
    xr = rx.random((samples, d))
    pr = _unit_vectors(rp, samples, d) * (R * rr.random((samples, 1)) ** (1.0 / d))
    x = np.concatenate([xl, xr])
    p = np.concatenate([pl, pr])
    h = model.h_sub(eq, x, p)
    margins = C * (1 + np.linalg.norm(p, axis=1)) - np.abs(h)
    return _report("sublinear", margins, x, None, p, None, eq, seed,
                   {"lattice": len(xl), "random": samples}, note=f"C={C}, R={R}")


def _pairs(model, L, mu_max, samples, seed, p_max, p_min):
    """Samples ``(x, y, p, mu)`` with ``1 + L|x - y| <= mu <= mu_max`` and ``p_min <= |p| <= p_max``."""
    d = model.dim
    rx, rp, rm, rd, rr, rs = _streams(seed)
    reach = (mu_max - 1.0) / L
    # lattice part: deterministic x, zero and maximal separations, extreme mu
    xs_l = _lattice_x(d, 16 if d == 1 else 6)
    dirs = _lattice_dirs(d, 4)
    seps = np.array([0.0, 0.5 * reach, reach]) if reach > 0 else np.array([0.0])
    radii = np.array([p_min, 0.5 * (p_min + p_max), p_max])
    rows = []
    for x in xs_l:
        for s in seps:
            for dv in dirs:
                delta = s * dv
                mu_lo = 1.0 + L * np.linalg.norm(delta)
                for mu in sorted({mu_lo, mu_max, 0.5 * (mu_lo + mu_max)}):
                    if mu <= 1.0:
                        continue
                    for r in radii:
                        for pv in dirs:
                            rows.append((x, x + delta, r * pv, mu))
    xl = np.array([r[0] for r in rows]).reshape(-1, d)
    yl = np.array([r[1] for r in rows]).reshape(-1, d)
    pl = np.array([r[2] for r in rows]).reshape(-1, d)
    ml = np.array([r[3] for r in rows])
    x = rx.random((samples, d))
    delta = _unit_vectors(rd, samples, d) * (reach * rs.random((samples, 1)) ** (1.0 / d))
    y = x + delta
    mu_lo = 1.0 + L * np.linalg.norm(delta, axis=1)
    mu = mu_lo + (mu_max - mu_lo) * rm.random(samples)
    radius = p_min + (p_max - p_min) * rr.random((samples, 1))
    p = _unit_vectors(rp, samples, d) * radius
    return (np.concatenate([xl, x]), np.mod(np.concatenate([yl, y]), 1.0),
            np.concatenate([pl, p]), np.concatenate([ml, mu]), len(rows))


def _p_max(model, eq, L, given):
    if given is not None:
        return float(given)
    K = model.hamiltonians[eq].constants.K
    return 4.0 * max(L, K or 0.0)


def check_superlinear_elliptic(model: ModelSpec, eq: int, C_bar: float | None = None, L: float | None = None,
                               mu_max: float | None = None, samples: int = 4000, seed: int = 0,
                               p_max: float | None = None) -> AssumptionReport:
    """Margin ``Hs(x, p) - mu Hs(y, p / mu) + C_bar |p|`` over ``|p| >= L``, ``1 + L|x - y| <= mu <= mu_max``."""
    _check_eq(model, eq)
    C_bar = _constant(model, eq, "C_bar", C_bar)
    L = _constant(model, eq, "L", L)
    mu_max = _constant(model, eq, "mu_max", mu_max)
    if L <= 1 or not math.isfinite(mu_max) or mu_max <= 1:
        raise UsageError("need L > 1 and finite mu_max > 1")
    pm = _p_max(model, eq, L, p_max)
    x, y, p, mu, n_lat = _pairs(model, L, mu_max, samples, seed, pm, L)
    margins = (model.h_super(eq, x, p) - mu * model.h_super(eq, y, p / mu[:, None])
               + C_bar * np.linalg.norm(p, axis=1))
    return _report("superlinear_elliptic", margins, x, y, p, mu, eq, seed,
                   {"lattice": n_lat, "random": samples},
                   note=f"C_bar={C_bar}, L={L}, mu_max={mu_max}, |p|<={pm}")


def _sigma_constants(model: ModelSpec, eq: int) -> tuple[float, float]:
    diff = model.diffusions[eq]
    return diff.sup_norm(model.dim), diff.lipschitz()


def check_superlinear_degenerate(model: ModelSpec, eq: int, L: float | None = None, samples: int = 4000,
                                 rhs_constant: float | None = None, mu_max: float | None = None,
                                 seed: int = 0, p_max: float | None = None) -> AssumptionReport:
    """Margin of ``Hs(x, p) - mu Hs(y, p / mu) >= (mu - 1)(K0 + N|s_x|^2 |p| + 2|s_x||s||p|)``.

    ``K0`` defaults to ``sup |Hs(., 0)|``; for systems pass
    ``(2 lambda_D + 1) H`` as ``rhs_constant``.
    """
    _check_eq(model, eq)
    L = _constant(model, eq, "L", L)
    mu_max = _constant(model, eq, "mu_max", mu_max)
    if L <= 1 or not math.isfinite(mu_max) or mu_max <= 1:
        raise UsageError("need L > 1 and finite mu_max > 1")
    K0 = float(rhs_constant) if rhs_constant is not None else _h_at_zero(model, "super", eq)
    s_sup, s_lip = _sigma_constants(model, eq)
    if not math.isfinite(s_lip):
        return AssumptionReport("superlinear_degenerate", False, -math.inf, {"eq": eq}, seed, {}, eq,
                                "sigma is not Lipschitz")
    N = model.dim
    pm = _p_max(model, eq, L, p_max)
    x, y, p, mu, n_lat = _pairs(model, L, mu_max, samples, seed, pm, L)
    pn = np.linalg.norm(p, axis=1)
    lhs = model.h_super(eq, x, p) - mu * model.h_super(eq, y, p / mu[:, None])
    rhs = (mu - 1.0) * (K0 + N * s_lip**2 * pn + 2 * s_lip * s_sup * pn)
    return _report("superlinear_degenerate", lhs - rhs, x, y, p, mu, eq, seed,
                   {"lattice": n_lat, "random": samples},
                   note=f"L={L}, mu_max={mu_max}, rhs_constant={K0}, |p|<={pm}")


def check_ssa4(model: ModelSpec, eq: int, L: float | None = None, samples: int = 4000,
               seed: int = 0) -> AssumptionReport:
    """Margin ``H(x, p) - |p| (H(y, p/|p|) + sup|H(., 0)| + N^{3/2} |s_x|^2)`` on the sphere ``|p| = L``."""
    _check_eq(model, eq)
    L = _constant(model, eq, "L", L)
    if L <= 1:
        raise UsageError("need L > 1")
    d = model.dim
    rx, rp, _, rd, *_ = _streams(seed)
    xs_l = _lattice_x(d, 32 if d == 1 else 8)
    dirs = _lattice_dirs(d)
    n_l = len(xs_l)
    xl = np.repeat(xs_l, n_l * len(dirs), axis=0)
    yl = np.tile(np.repeat(xs_l, len(dirs), axis=0), (n_l, 1))
    ql = np.tile(dirs, (n_l * n_l, 1))
    x = np.concatenate([xl, rx.random((samples, d))])
    y = np.concatenate([yl, rd.random((samples, d))])
    q = np.concatenate([ql, _unit_vectors(rp, samples, d)])
    h0 = _h_at_zero(model, "full", eq)
    _, s_lip = _sigma_constants(model, eq)

    def H(pts, pp):
        return model.h_sub(eq, pts, pp) + model.h_super(eq, pts, pp)

    margins = H(x, L * q) - L * (H(y, q) + h0 + d**1.5 * s_lip**2)
    return _report("ssa4", margins, x, y, L * q, None, eq, seed,
                   {"lattice": len(xl), "random": samples}, note=f"L={L}")


def check_partition(model: ModelSpec, grid: PeriodicGrid | None = None) -> AssumptionReport:
    """Margin ``min_x sum_i nu_i(x)`` over the grid nodes (strictly positive required)."""
    grid = grid or PeriodicGrid(model.dim, 256 if model.dim == 1 else 64)
    x = grid.points
    total = sum(d.nu(x) for d in model.diffusions)
    k = int(np.argmin(total))
    worst = float(total[k])
    return AssumptionReport("partition", bool(worst > 0), worst,
                            {"x": x[k].tolist(), "y": None, "p": None, "mu": None, "eq": None},
                            None, {"lattice": grid.n_nodes}, None,
                            "sum of declared ellipticity bounds")


def check_ellipticity(model: ModelSpec, eq: int, grid: PeriodicGrid | None = None,
                      require_positive: bool = True) -> AssumptionReport:
    """Declared ``nu_i`` is a valid lower bound for ``A_i`` (and positive, if required)."""
    _check_eq(model, eq)
    grid = grid or PeriodicGrid(model.dim, 256 if model.dim == 1 else 64)
    x = grid.points
    eig = np.linalg.eigvalsh(model.diffusions[eq].A(x))[:, 0]
    nu = model.diffusions[eq].nu(x)
    bound = eig - nu
    bound = np.where(np.abs(bound) <= ROUNDING, 0.0, bound)
    if np.any(bound < 0) or not require_positive:
        # declared nu is not a lower bound for A (or only the bound is asked for)
        return _report("ellipticity", bound, x, None, None, None, eq, None, {"lattice": grid.n_nodes},
                       note="smallest eigenvalue of A minus declared nu")
    k = int(np.argmin(nu))
    return AssumptionReport("ellipticity", bool(nu[k] > 0), float(nu[k]),
                            {"x": x[k].tolist(), "y": None, "p": None, "mu": None, "eq": eq},
                            None, {"lattice": grid.n_nodes}, eq, "declared nu, certified against A")


def check_diffusion_regularity(model: ModelSpec, eq: int, grid: PeriodicGrid | None = None) -> AssumptionReport:
    """``A = sigma sigma^T`` symmetric PSD at the nodes and ``sigma`` with a finite Lipschitz quotient."""
    _check_eq(model, eq)
    grid = grid or PeriodicGrid(model.dim, 256 if model.dim == 1 else 64)
    x = grid.points
    diff = model.diffusions[eq]
    A = diff.A(x)
    eig = np.linalg.eigvalsh(A)[:, 0]
    sig = diff.sigma(x).reshape(len(x), -1)
    h = grid.spacing
    shifted = diff.sigma(np.mod(x + h, 1.0)).reshape(len(x), -1)
    quot = np.linalg.norm(shifted - sig, axis=1) / (h * math.sqrt(model.dim))
    bound = diff.lipschitz()
    lip_margin = (bound * 1.01 + 1e-9 - quot) if math.isfinite(bound) else -np.ones_like(quot)
    margins = np.minimum(eig + 1e-12, lip_margin)
    return _report("diffusion_regularity", margins, x, None, None, None, eq, None, {"lattice": grid.n_nodes})


def check_local_lipschitz(model: ModelSpec, eq: int, K: float | None = None, samples: int = 2000,
                          seed: int = 0, separations=(1e-2, 1e-3, 1e-4, 1e-5),
                          growth: float = 4.0) -> AssumptionReport:
    """Local Lipschitz regularity of ``H_i`` on ``|p| <= 2K`` by difference quotients.

    Quotients are sampled at shrinking separations in ``x`` and in ``p``;
    a locally Lipschitz function keeps them bounded, a Hölder-type one makes
    them grow. Per-sample margin: ``growth * max(q_coarse, 1) - max(q_finer)``.
    """
    _check_eq(model, eq)
    K = _constant(model, eq, "K", K)
    d = model.dim
    rx, rp, _, rd, rr, _ = _streams(seed)
    xl = _lattice_x(d, 64 if d == 1 else 16)
    x = np.concatenate([xl, rx.random((samples, d))])
    n = len(x)
    p = _unit_vectors(rp, n, d) * (2 * K * rr.random((n, 1)))
    dirs = _unit_vectors(rd, n, d)

    def H(pts, pp):
        return model.h_sub(eq, pts, pp) + model.h_super(eq, pts, pp)

    base = H(x, p)
    quots = []
    for s in separations:
        qx = np.abs(H(np.mod(x + s * dirs, 1.0), p) - base) / s
        qp = np.abs(H(x, p + s * dirs) - base) / s
        quots.append(np.maximum(qx, qp))
    q = np.stack(quots)  # (n_sep, n)
    margins = growth * np.maximum(q[0], 1.0) - q[1:].max(axis=0)
    return _report("local_lipschitz", margins, x, None, p, None, eq, seed,
                   {"lattice": len(xl), "random": samples, "separations": list(separations)},
                   note=f"max quotient {q[0].max():.3g} at {separations[0]}, {q[-1].max():.3g} at {separations[-1]}")


@dataclass
class LintResult:
    model: str
    reports: list[AssumptionReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    def by_name(self, hypothesis: str) -> list[AssumptionReport]:
        return [r for r in self.reports if r.hypothesis == hypothesis]

    def to_json(self) -> str:
        return json.dumps({"model": self.model, "passed": self.passed,
                           "reports": [r.to_dict() for r in self.reports]}, indent=2, sort_keys=True)


def lint(model: ModelSpec, samples: int = 4000, seed: int = 0, convergence: bool | None = None) -> LintResult:
    """Check each equation against its declared hypothesis class.

    ``"elliptic"`` equations need uniform ellipticity, a sublinear bound on
    ``h_sub`` and the elliptic superlinear condition. ``"degenerate"``
    equations need ``h_sub = 0`` and the degenerate superlinear condition
    with constant ``(2 lambda_D + 1) H``. With ``convergence`` (default: the
    model's flag) the partition of ellipticity and local Lipschitz
    regularity are added.
    """
    convergence = model.convergence_supported if convergence is None else convergence
    result = LintResult(model.name)
    lam = coupling_analysis(model.coupling).lambda_D
    lam = 0.0 if model.m == 1 else lam
    H = _h_at_zero(model, "full")
    for i, h in enumerate(model.hamiltonians):
        result.reports.append(check_diffusion_regularity(model, i))
        cons = h.constants
        if h.hclass == "elliptic":
            result.reports.append(check_ellipticity(model, i))
            R = 4.0 * max(cons.L or 1.0, cons.K or 1.0)
            result.reports.append(check_sublinear(model, i, R=R, samples=samples, seed=seed))
            result.reports.append(check_superlinear_elliptic(model, i, samples=samples, seed=seed))
        elif h.hclass == "degenerate":
            R = 4.0 * max(cons.L or 1.0, cons.K or 1.0)
            rep = check_sublinear(model, i, C=0.0, R=R, samples=samples, seed=seed)
            rep.hypothesis = "no_sublinear_part"
            result.reports.append(rep)
            result.reports.append(check_superlinear_degenerate(
                model, i, samples=samples, seed=seed, rhs_constant=(2 * lam + 1) * H))
        if convergence:
            K = h.constants.K or h.constants.L or 1.0
            result.reports.append(check_local_lipschitz(model, i, K=K, samples=samples // 2, seed=seed))
    if convergence:
        result.reports.append(check_partition(model))
    return result
