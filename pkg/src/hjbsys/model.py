"""Hamiltonians, diffusions, coupling matrices and the builtin model registry.

Hamiltonians are sums of terms drawn from a closed catalog so that every
model can round-trip through a plain config dict. Each term knows three
things about itself:

* its value ``H(x, p)``;
* a monotone numerical flux ``F(x, a, b)`` taking backward differences ``a``
  and forward differences ``b`` (nondecreasing in ``a``, nonincreasing in
  ``b``, and ``F(x, p, p) = H(x, p)``);
* a bound on ``|dH/dp_k|`` over a box of gradients, which feeds both the
  Lax-Friedrichs viscosity and the explicit step-size bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, ClassVar

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ModelDefinitionError, UsageError

__all__ = [
    "XFunction",
    "Potential",
    "Drift",
    "Power",
    "BoundedCos",
    "ControlOption",
    "Control",
    "DeclaredConstants",
    "HamiltonianSpec",
    "DiffusionSpec",
    "CouplingMatrix",
    "CouplingAnalysis",
    "ModelSpec",
    "eval_hamiltonian",
    "truncate_hamiltonian",
    "coupling_analysis",
    "constant_model",
    "builtin",
    "available_models",
    "model_from_dict",
]

TWO_PI = 2.0 * math.pi


# --------------------------------------------------------------------------
# x-dependent coefficients
# --------------------------------------------------------------------------

_XKINDS = ("const", "cos", "sin", "sqrt_abs_sin", "pos_cos", "neg_cos")


@dataclass(frozen=True)
class XFunction:
    """Scalar periodic coefficient ``offset + amp * shape(2 pi freq x[axis] + phase)``."""

    kind: str = "const"
    amp: float = 0.0
    offset: float = 0.0
    freq: int = 1
    axis: int = 0
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in _XKINDS:
            raise UsageError(f"unknown coefficient kind {self.kind!r}; choose from {_XKINDS}")

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "const":
            return np.full(x.shape[0], float(self.offset))
        if self.axis >= x.shape[1]:
            raise UsageError(f"coefficient uses axis {self.axis} but points have dim {x.shape[1]}")
        s = TWO_PI * self.freq * x[:, self.axis] + self.phase
        if self.kind == "cos":
            shape = np.cos(s)
        elif self.kind == "sin":
            shape = np.sin(s)
        elif self.kind == "sqrt_abs_sin":
            shape = np.sqrt(np.abs(np.sin(s)))
        elif self.kind == "pos_cos":
            shape = np.maximum(np.cos(s), 0.0)
        else:
            shape = np.maximum(-np.cos(s), 0.0)
        return self.offset + self.amp * shape

    def sup_abs(self) -> float:
        return abs(self.offset) + (0.0 if self.kind == "const" else abs(self.amp))

    def inf(self) -> float:
        if self.kind == "const" or self.amp == 0:
            return float(self.offset)
        if self.kind in ("pos_cos", "neg_cos", "sqrt_abs_sin"):
            return self.offset + min(0.0, self.amp)
        return self.offset - abs(self.amp)

    def lipschitz(self) -> float:
        if self.kind == "const" or self.amp == 0:
            return 0.0
        if self.kind == "sqrt_abs_sin":
            return math.inf
        return abs(self.amp) * TWO_PI * abs(self.freq)

    def to_dict(self) -> dict:
        if self.kind == "const":
            return {"kind": "const", "value": self.offset}
        return {
            "kind": self.kind,
            "amp": self.amp,
            "offset": self.offset,
            "freq": self.freq,
            "axis": self.axis,
            "phase": self.phase,
        }

    @classmethod
    def from_dict(cls, d) -> XFunction:
        if isinstance(d, (int, float)):
            return cls("const", offset=float(d))
        if isinstance(d, XFunction):
            return d
        d = dict(d)
        kind = d.pop("kind", "const")
        if kind == "const":
            return cls("const", offset=float(d.get("value", d.get("offset", 0.0))))
        return cls(kind, **{k: d[k] for k in ("amp", "offset", "freq", "axis", "phase") if k in d})


def _const(v: float) -> XFunction:
    return XFunction("const", offset=float(v))


def _vec(funcs, x) -> np.ndarray:
    return np.stack([f(x) for f in funcs], axis=-1)


# --------------------------------------------------------------------------
# Hamiltonian terms
# --------------------------------------------------------------------------


@dataclass
class BoundTerm:
    """A term with its coefficients evaluated at fixed points."""

    value: Callable[[np.ndarray], np.ndarray]
    flux: Callable[[np.ndarray, np.ndarray], np.ndarray]
    slope: Callable[[np.ndarray, np.ndarray], np.ndarray]


class Term:
    kind: ClassVar[str] = ""
    p_dependent: ClassVar[bool] = True

    def bind(self, x: np.ndarray) -> BoundTerm:  # pragma: no cover - interface
        raise NotImplementedError

    def value(self, x, p) -> np.ndarray:
        return self.bind(x).value(p)

    def to_dict(self) -> dict:  # pragma: no cover - interface
        raise NotImplementedError


def _pos(v):
    return np.maximum(v, 0.0)


@dataclass(frozen=True)
class Potential(Term):
    """Gradient-independent part ``g(x)``."""

    g: XFunction
    kind: ClassVar[str] = "potential"
    p_dependent: ClassVar[bool] = False

    def bind(self, x):
        g = self.g(x)
        dim = np.atleast_2d(x).shape[1]

        def value(p):
            return g

        def flux(a, b):
            return g

        def slope(lo, hi):
            return np.zeros(np.broadcast_shapes(np.shape(lo), (g.shape[0], dim)))

        return BoundTerm(value, flux, slope)

    def to_dict(self):
        return {"kind": self.kind, "g": self.g.to_dict()}


@dataclass(frozen=True)
class Drift(Term):
    """Transport term ``<b(x), p>``; upwinded on the sign of each ``b_k``."""

    b: tuple[XFunction, ...]
    kind: ClassVar[str] = "drift"

    def bind(self, x):
        c = _vec(self.b, x)
        cp, cm = _pos(c), np.minimum(c, 0.0)
        absc = np.abs(c)
        return BoundTerm(
            value=lambda p: np.sum(c * p, axis=-1),
            flux=lambda a, b: np.sum(cp * a + cm * b, axis=-1),
            slope=lambda lo, hi: np.broadcast_to(absc, np.broadcast_shapes(np.shape(lo), absc.shape)),
        )

    def to_dict(self):
        return {"kind": self.kind, "b": [f.to_dict() for f in self.b]}


@dataclass(frozen=True)
class Power(Term):
    """Radial term ``coef(x) |p|^exponent`` with ``exponent >= 1``.

    The flux is the Godunov choice for a radial convex (``coef >= 0``) or
    concave (``coef < 0``) function, chosen node by node.
    """

    coef: XFunction
    exponent: float = 2.0
    kind: ClassVar[str] = "power"

    def __post_init__(self):
        if self.exponent < 1:
            raise UsageError(f"power exponent must be >= 1, got {self.exponent}")

    def bind(self, x):
        c = self.coef(x)
        q = float(self.exponent)
        convex = (c >= 0)[:, None]

        def radial(sq):
            if q == 2.0:
                return c * sq
            if q == 1.0:
                return c * np.sqrt(sq)
            return c * sq ** (0.5 * q)

        def value(p):
            return radial(np.sum(p * p, axis=-1))

        def flux(a, b):
            up = np.maximum(_pos(a), _pos(-b))
            down = np.maximum(_pos(-a), _pos(b))
            s = np.where(convex, up, down)
            return radial(np.sum(s * s, axis=-1))

        def slope(lo, hi):
            pmax = np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi)), axis=-1)
            bound = np.abs(c) * q * (pmax ** (q - 1.0) if q != 1.0 else 1.0)
            return np.repeat(bound[..., None], np.shape(lo)[-1], axis=-1)

        return BoundTerm(value, flux, slope)

    def to_dict(self):
        return {"kind": self.kind, "coef": self.coef.to_dict(), "exponent": self.exponent}


@dataclass(frozen=True)
class BoundedCos(Term):
    """Bounded nonconvex term ``amp(x) cos(freq |p|)``; local Lax-Friedrichs flux."""

    amp: XFunction
    freq: float = 1.0
    kind: ClassVar[str] = "bounded_cos"

    def bind(self, x):
        amp = self.amp(x)
        w = float(self.freq)
        alpha = (np.abs(amp) * abs(w))[:, None]

        def value(p):
            return amp * np.cos(w * np.linalg.norm(p, axis=-1))

        def flux(a, b):
            mid = 0.5 * (a + b)
            return value(mid) - np.sum(alpha * (b - a), axis=-1) / 2.0

        def slope(lo, hi):
            return np.broadcast_to(alpha, np.broadcast_shapes(np.shape(lo), alpha.shape))

        return BoundTerm(value, flux, slope)

    def to_dict(self):
        return {"kind": self.kind, "amp": self.amp.to_dict(), "freq": self.freq}


@dataclass(frozen=True)
class ControlOption:
    label: str
    drift: tuple[XFunction, ...]
    cost: XFunction

    def to_dict(self):
        return {"label": self.label, "drift": [f.to_dict() for f in self.drift], "cost": self.cost.to_dict()}


@dataclass(frozen=True)
class Control(Term):
    """Finite-control Hamiltonian ``max_theta { -<b_theta(x), p> - f_theta(x) }``."""

    options: tuple[ControlOption, ...]
    kind: ClassVar[str] = "control"

    def __post_init__(self):
        if not self.options:
            raise UsageError("control term needs at least one option")
        labels = [o.label for o in self.options]
        if len(set(labels)) != len(labels):
            raise UsageError(f"duplicate control labels {labels}")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.options)

    def bind(self, x):
        vel = np.stack([-_vec(o.drift, x) for o in self.options])  # (K, n, d)
        cost = np.stack([o.cost(x) for o in self.options])  # (K, n)
        vp, vm = _pos(vel), np.minimum(vel, 0.0)
        absb = np.abs(vel).max(axis=0)

        def value(p):
            return np.max(np.sum(vel * p[..., None, :, :], axis=-1) - cost, axis=-2)

        def flux(a, b):
            per = np.sum(vp * a[..., None, :, :] + vm * b[..., None, :, :], axis=-1) - cost
            return np.max(per, axis=-2)

        def slope(lo, hi):
            return np.broadcast_to(absb, np.broadcast_shapes(np.shape(lo), absb.shape))

        return BoundTerm(value, flux, slope)

    def restrict(self, label: str) -> Control:
        chosen = [o for o in self.options if o.label == label]
        if not chosen:
            raise UsageError(f"control label {label!r} not in {self.labels}")
        return Control(tuple(chosen))

    def to_dict(self):
        return {"kind": self.kind, "options": [o.to_dict() for o in self.options]}


_TERM_KINDS = {cls.kind: cls for cls in (Potential, Drift, Power, BoundedCos, Control)}


def term_from_dict(d: dict) -> Term:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "norm":
        return Power(XFunction.from_dict(d.get("coef", 1.0)), 1.0)
    if kind not in _TERM_KINDS:
        raise UsageError(f"unknown hamiltonian term kind {kind!r}; choose from {sorted(_TERM_KINDS)}")
    if kind == "potential":
        return Potential(XFunction.from_dict(d.get("g", 0.0)))
    if kind == "drift":
        return Drift(tuple(XFunction.from_dict(f) for f in d["b"]))
    if kind == "power":
        return Power(XFunction.from_dict(d.get("coef", 1.0)), float(d.get("exponent", 2.0)))
    if kind == "bounded_cos":
        return BoundedCos(XFunction.from_dict(d["amp"]), float(d.get("freq", 1.0)))
    opts = tuple(
        ControlOption(
            str(o["label"]),
            tuple(XFunction.from_dict(f) for f in o["drift"]),
            XFunction.from_dict(o.get("cost", 0.0)),
        )
        for o in d["options"]
    )
    return Control(opts)


# --------------------------------------------------------------------------
# Per-equation specs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DeclaredConstants:
    """Structural constants a model declares for its hypothesis checks.

    ``C_sub`` bounds the sublinear part, ``C_bar``/``L``/``mu_max`` enter
    the superlinear conditions, ``K`` is the expected gradient scale.
    """

    C_sub: float | None = None
    C_bar: float | None = None
    L: float | None = None
    mu_max: float | None = None
    K: float | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class HamiltonianSpec:
    """One equation's Hamiltonian ``H = h_sub + h_super``.

    ``hclass`` records which hypothesis family the equation is meant to
    satisfy: ``"elliptic"`` (uniform ellipticity, sublinear part, elliptic
    superlinear condition) or ``"degenerate"`` (no sublinear part, the
    degenerate superlinear condition). ``None`` declares nothing.
    """

    sub: tuple[Term, ...] = ()
    sup: tuple[Term, ...] = ()
    constants: DeclaredConstants = field(default_factory=DeclaredConstants)
    hclass: str | None = None

    @property
    def terms(self) -> tuple[Term, ...]:
        return self.sub + self.sup

    @property
    def theta_set(self) -> tuple[str, ...]:
        labels: list[str] = []
        for t in self.terms:
            if isinstance(t, Control):
                labels.extend(t.labels)
        return tuple(labels)

    def to_dict(self):
        return {
            "sub": [t.to_dict() for t in self.sub],
            "super": [t.to_dict() for t in self.sup],
            "constants": self.constants.to_dict(),
            "class": self.hclass,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            sub=tuple(term_from_dict(t) for t in d.get("sub", ())),
            sup=tuple(term_from_dict(t) for t in d.get("super", ())),
            constants=DeclaredConstants(**d.get("constants", {})),
            hclass=d.get("class"),
        )


_SIGMA_KINDS = ("zero", "scalar", "matrix")


@dataclass(frozen=True)
class DiffusionSpec:
    """Diffusion ``sigma(x)`` of one equation and its declared ellipticity bound.

    ``kind="scalar"`` means ``sigma = s(x) I``; ``kind="matrix"`` is a
    constant ``dim x dim`` matrix. ``A = sigma sigma^T``.
    """

    kind: str = "zero"
    scale: XFunction = field(default_factory=lambda: _const(0.0))
    matrix: tuple[tuple[float, ...], ...] | None = None
    nu: XFunction = field(default_factory=lambda: _const(0.0))

    def __post_init__(self):
        if self.kind not in _SIGMA_KINDS:
            raise UsageError(f"unknown sigma kind {self.kind!r}; choose from {_SIGMA_KINDS}")
        if self.kind == "matrix" and self.matrix is None:
            raise UsageError("sigma kind 'matrix' needs a matrix")

    def sigma(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k, d = x.shape
        if self.kind == "zero":
            return np.zeros((k, d, d))
        if self.kind == "scalar":
            return self.scale(x)[:, None, None] * np.eye(d)[None]
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape != (d, d):
            raise UsageError(f"sigma matrix shape {mat.shape} does not match dim {d}")
        return np.broadcast_to(mat, (k, d, d)).copy()

    def A(self, x) -> np.ndarray:
        s = self.sigma(x)
        return s @ np.swapaxes(s, -1, -2)

    def sup_norm(self, dim: int) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "scalar":
            return self.scale.sup_abs()
        return float(np.linalg.norm(np.asarray(self.matrix, dtype=float), 2))

    def lipschitz(self) -> float:
        return self.scale.lipschitz() if self.kind == "scalar" else 0.0

    def to_dict(self):
        d = {"kind": self.kind, "nu": self.nu.to_dict()}
        if self.kind == "scalar":
            d["scale"] = self.scale.to_dict()
        if self.kind == "matrix":
            d["matrix"] = [list(r) for r in self.matrix]
        return d

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind", "zero")
        mat = d.get("matrix")
        return cls(
            kind=kind,
            scale=XFunction.from_dict(d.get("scale", 0.0)),
            matrix=tuple(tuple(float(v) for v in r) for r in mat) if mat is not None else None,
            nu=XFunction.from_dict(d.get("nu", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class CouplingMatrix:
    """Linear zeroth-order coupling ``sum_j d_ij u_j``."""

    d: np.ndarray

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.d, dtype=float))
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise UsageError(f"coupling matrix must be square, got shape {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)

    @property
    def m(self) -> int:
        return self.d.shape[0]

    @property
    def monotone(self) -> bool:
        off = self.d - np.diag(np.diag(self.d))
        scale = max(1.0, float(np.abs(self.d).max()))
        rows_ok = np.all(np.abs(self.d.sum(axis=1)) <= 1e-12 * scale)
        return bool(np.all(np.diag(self.d) >= 0) and np.all(off <= 0) and rows_ok)

    @property
    def irreducible(self) -> bool:
        if self.m == 1:
            return True
        adj = (self.d != 0).astype(int)
        np.fill_diagonal(adj, 0)
        n_comp, _ = connected_components(adj, directed=True, connection="strong")
        return n_comp == 1

    @property
    def max_row_sum(self) -> float:
        return float(np.abs(self.d).sum(axis=1).max())

    @classmethod
    def standard(cls, m: int) -> CouplingMatrix:
        if m == 1:
            return cls(np.zeros((1, 1)))
        if m == 2:
            return cls(np.array([[1.0, -1.0], [-1.0, 1.0]]))
        raise UsageError("standard coupling defined for m in {1, 2}")

    def to_dict(self):
        return [[float(v) for v in row] for row in self.d]

    def __eq__(self, other):
        return isinstance(other, CouplingMatrix) and np.array_equal(self.d, other.d)

    __hash__ = None


@dataclass(frozen=True)
class CouplingAnalysis:
    monotone: bool
    irreducible: bool
    Lambda: np.ndarray | None
    lambda_D: float


def coupling_analysis(D: CouplingMatrix) -> CouplingAnalysis:
    """Positive left null vector of ``D`` (min component 1) and ``lambda_D``.

    ``lambda_D = max_i (1 / Lambda_i) sum_{j != i} Lambda_j``.
    """
    if not isinstance(D, CouplingMatrix):
        D = CouplingMatrix(D)
    monotone, irreducible = D.monotone, D.irreducible
    if not (monotone and irreducible):
        return CouplingAnalysis(monotone, irreducible, None, math.nan)
    # zero row sums give adj(D) = alpha 1 Lambda^T, so Lambda_i is the (i, i) principal minor
    idx = np.arange(D.m)
    lam = np.array([np.linalg.det(D.d[np.ix_(idx != i, idx != i)]) if D.m > 1 else 1.0 for i in idx])
    if not np.all(lam > 0):
        return CouplingAnalysis(monotone, False, None, math.nan)
    lam = lam / lam.min()
    total = lam.sum()
    lambda_D = float(max((total - lam[i]) / lam[i] for i in range(D.m)))
    return CouplingAnalysis(monotone, irreducible, lam, lambda_D)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


def _radial_clip(p: np.ndarray, radius: float | None) -> np.ndarray:
    if radius is None:
        return p
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    scale = np.where(norm > radius, radius / np.where(norm > 0, norm, 1.0), 1.0)
    return p * scale


@dataclass(frozen=True)
class ModelSpec:
    """A weakly coupled system: one Hamiltonian and diffusion per equation."""

    name: str
    dim: int
    hamiltonians: tuple[HamiltonianSpec, ...]
    diffusions: tuple[DiffusionSpec, ...]
    coupling: CouplingMatrix
    initial: tuple[XFunction, ...] = ()
    convergence_supported: bool = False
    truncation: float | None = None
    description: str = ""

    def __post_init__(self):
        m = self.coupling.m
        if len(self.hamiltonians) != m or len(self.diffusions) != m:
            raise ModelDefinitionError(
                f"model {self.name!r}: {len(self.hamiltonians)} hamiltonians, "
                f"{len(self.diffusions)} diffusions, coupling of size {m}"
            )
        if self.initial and len(self.initial) != m:
            raise ModelDefinitionError(f"model {self.name!r}: initial data has {len(self.initial)} components, m={m}")
        if self.dim not in (1, 2):
            raise ModelDefinitionError(f"model {self.name!r}: dim must be 1 or 2")
        if not self.coupling.monotone:
            raise ModelDefinitionError(
                f"model {self.name!r}: coupling needs d_ii >= 0, d_ij <= 0 and zero row sums"
            )
        if self.truncation is not None and not self.truncation > 0:
            raise ModelDefinitionError("truncation radius must be positive")

    @property
    def m(self) -> int:
        return self.coupling.m

    @property
    def control_form(self) -> bool:
        return all(
            any(isinstance(t, Control) for t in h.terms)
            and all(isinstance(t, (Control, Potential)) for t in h.terms)
            for h in self.hamiltonians
        )

    def bind(self, eq: int, x) -> list[BoundTerm]:
        return [t.bind(x) for t in self.hamiltonians[eq].terms]

    def _eval_terms(self, terms, x, p):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = _radial_clip(np.atleast_2d(np.asarray(p, dtype=float)), self.truncation)
        if p.shape[-1] != self.dim or x.shape[-1] != self.dim:
            raise UsageError(f"points and gradients must have dim {self.dim}")
        out = np.zeros(np.broadcast_shapes(x.shape[:-1], p.shape[:-1]))
        for t in terms:
            out = out + t.bind(x).value(p)
        return out

    def h_sub(self, eq, x, p) -> np.ndarray:
        return self._eval_terms(self.hamiltonians[eq].sub, x, p)

    def h_super(self, eq, x, p) -> np.ndarray:
        return self._eval_terms(self.hamiltonians[eq].sup, x, p)

    def initial_field(self, grid):
        from .grid import SystemField

        if not self.initial:
            return SystemField.zeros(grid, self.m)
        return SystemField.from_functions(grid, self.initial)

    def with_initial(self, funcs) -> ModelSpec:
        return replace(self, initial=tuple(XFunction.from_dict(f) for f in funcs))

    def with_policy(self, policy) -> ModelSpec:
        """Freeze the control: keep one label per equation.

        ``policy`` is a single label (used for every equation) or a sequence
        with one label per equation.
        """
        labels = [policy] * self.m if isinstance(policy, (str, int)) else list(policy)
        if len(labels) != self.m:
            raise UsageError(f"policy needs {self.m} labels, got {len(labels)}")
        hams = []
        for h, lab in zip(self.hamiltonians, labels):
            def fix(terms):
                return tuple(t.restrict(str(lab)) if isinstance(t, Control) else t for t in terms)

            hams.append(replace(h, sub=fix(h.sub), sup=fix(h.sup)))
        return replace(self, hamiltonians=tuple(hams), name=f"{self.name}[{','.join(map(str, labels))}]")

    def control_data(self, eq: int) -> list[tuple[str, Callable, Callable]]:
        """``(label, drift(x), cost(x))`` triples of a control-form equation.

        Potentials are folded into the running cost, so that
        ``H = max_theta {-<b_theta, p> - cost_theta}`` exactly.
        """
        h = self.hamiltonians[eq]
        controls = [t for t in h.terms if isinstance(t, Control)]
        others = [t for t in h.terms if not isinstance(t, (Control, Potential))]
        if len(controls) != 1 or others:
            raise UsageError(f"equation {eq} of {self.name!r} is not in control form")
        pots = [t.g for t in h.terms if isinstance(t, Potential)]
        out = []
        for opt in controls[0].options:
            def drift(x, _o=opt):
                return _vec(_o.drift, x)

            def cost(x, _o=opt):
                return _o.cost(x) - sum((g(x) for g in pots), np.zeros(np.atleast_2d(x).shape[0]))

            out.append((opt.label, drift, cost))
        return out

    def h_at_zero_max(self, x) -> float:
        """``max_{j, x} |H_j(x, 0)|`` over the given points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p0 = np.zeros_like(x)
        return float(max(np.abs(self._eval_terms(h.terms, x, p0)).max() for h in self.hamiltonians))

    def declared_gradient_scale(self) -> float:
        vals = [h.constants.K for h in self.hamiltonians if h.constants.K is not None]
        return float(max(vals)) if vals else 1.0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "m": self.m,
            "equations": [
                {"hamiltonian": h.to_dict(), "sigma": s.to_dict()}
                for h, s in zip(self.hamiltonians, self.diffusions)
            ],
            "coupling": {"matrix": self.coupling.to_dict()},
            "initial": [f.to_dict() for f in self.initial],
            "convergence_supported": self.convergence_supported,
            "truncation": self.truncation,
            "description": self.description,
        }


def model_from_dict(d: dict) -> ModelSpec:
    """Build a model from a config dict (the inverse of :meth:`ModelSpec.to_dict`)."""
    try:
        eqs = d["equations"]
        m = int(d.get("m", len(eqs)))
        if len(eqs) != m:
            raise UsageError(f"model.m={m} but {len(eqs)} equations given")
        coupling = d.get("coupling", {}).get("matrix")
        D = CouplingMatrix(np.asarray(coupling, dtype=float)) if coupling is not None else CouplingMatrix.standard(m)
        return ModelSpec(
            name=str(d.get("name", "inline")),
            dim=int(d.get("dim", 1)),
            hamiltonians=tuple(HamiltonianSpec.from_dict(e.get("hamiltonian", {})) for e in eqs),
            diffusions=tuple(DiffusionSpec.from_dict(e.get("sigma", {})) for e in eqs),
            coupling=D,
            initial=tuple(XFunction.from_dict(f) for f in d.get("initial", ())),
            convergence_supported=bool(d.get("convergence_supported", False)),
            truncation=d.get("truncation"),
            description=str(d.get("description", "")),
        )
    except (KeyError, TypeError) as exc:
        raise UsageError(f"malformed model config: {exc!r}") from exc


def eval_hamiltonian(model: ModelSpec, eq: int, x, p) -> np.ndarray | float:
    """``h_sub(x, p) + h_super(x, p)`` (after truncation, if the model carries one)."""
    if not 0 <= eq < model.m:
        raise UsageError(f"equation index {eq} out of range [0, {model.m})")
    scalar = np.ndim(p) <= 1 and np.ndim(x) <= 1
    val = model._eval_terms(model.hamiltonians[eq].terms, x, p)
    if not np.all(np.isfinite(val)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(val)))[0])
        raise ModelDefinitionError(
            f"model {model.name!r}: non-finite H at eq={eq}, "
            f"x={np.atleast_2d(x)[min(bad, np.atleast_2d(x).shape[0] - 1)]}, "
            f"p={np.atleast_2d(p)[min(bad, np.atleast_2d(p).shape[0] - 1)]}"
        )
    return float(val[0]) if scalar else val


def truncate_hamiltonian(model: ModelSpec, n: float) -> ModelSpec:
    """Model whose Hamiltonians equal ``H(x, n p / |p|)`` for ``|p| >= n``."""
    if not n > 0:
        raise UsageError(f"truncation radius must be positive, got {n}")
    radius = float(n) if model.truncation is None else min(model.truncation, float(n))
    return replace(model, truncation=radius)


# --------------------------------------------------------------------------
# Builtin registry
# --------------------------------------------------------------------------


def _cos(amp, offset=0.0):
    return XFunction("cos", amp=amp, offset=offset)


def _sin(amp, offset=0.0):
    return XFunction("sin", amp=amp, offset=offset)


def _scalar_sigma(s: float) -> DiffusionSpec:
    return DiffusionSpec("scalar", scale=_const(s), nu=_const(s * s))


def constant_model(h0: float = 0.5, m: int = 2, dim: int = 1, sigma: float = 0.0) -> ModelSpec:
    """``H_i = h0`` in every equation; the exact solutions are constants."""
    diff = _scalar_sigma(sigma) if sigma else DiffusionSpec()
    return ModelSpec(
        name="constant_pair" if m == 2 else f"constant_m{m}",
        dim=dim,
        hamiltonians=tuple(HamiltonianSpec(sup=(Potential(_const(h0)),)) for _ in range(m)),
        diffusions=(diff,) * m,
        coupling=CouplingMatrix.standard(m),
        initial=(_const(0.0),) * m,
        description="constant Hamiltonians",
    )


def _linear_elliptic(dim):
    b = tuple(_const(0.0) for _ in range(dim))
    return ModelSpec(
        name="linear_elliptic",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sub=(Drift(b), Potential(_cos(-1.0))),
                constants=DeclaredConstants(C_sub=1.0, C_bar=1.0, L=2.0, mu_max=2.0, K=1.0),
                hclass="elliptic",
            ),
        ),
        diffusions=(_scalar_sigma(1.0),),
        coupling=CouplingMatrix.standard(1),
        initial=(_sin(1.0),),
        convergence_supported=True,
        description="-Laplacian + <b, Du> - f with b = 0, f = cos(2 pi x)",
    )


def _eikonal_cos(dim):
    return ModelSpec(
        name="eikonal_cos",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sup=(Power(_const(1.0), 2.0), Potential(_cos(-1.0))),
                constants=DeclaredConstants(L=3.0, mu_max=2.0, K=2.0),
                hclass="degenerate",
            ),
        ),
        diffusions=(DiffusionSpec(),),
        coupling=CouplingMatrix.standard(1),
        initial=(_const(0.0),),
        description="first-order |p|^2 - cos(2 pi x), no diffusion",
    )


def _typical_superlinear(dim):
    return ModelSpec(
        name="typical_superlinear",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sup=(
                    Power(_cos(0.5, 1.0), 2.0),
                    Power(_sin(0.2), 1.0),
                    Potential(_cos(-0.5)),
                ),
                constants=DeclaredConstants(L=6.0, mu_max=2.0, K=2.0),
                hclass="degenerate",
            ),
        ),
        diffusions=(_scalar_sigma(0.3),),
        coupling=CouplingMatrix.standard(1),
        initial=(_sin(0.5),),
        convergence_supported=True,
        description="a(x)|p|^2 + b(x)|p| + c(x) with a >= 1/2",
    )


def _asymmetric_pair(dim):
    return ModelSpec(
        name="asymmetric_pair",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sub=(Drift((_sin(0.5),) + tuple(_const(0.0) for _ in range(dim - 1))), Potential(_cos(0.5))),
                constants=DeclaredConstants(C_sub=0.5, C_bar=1.0, L=2.0, mu_max=3.0, K=2.0),
                hclass="elliptic",
            ),
            HamiltonianSpec(
                sup=(Power(_const(1.0), 2.0), Potential(_sin(0.5))),
                constants=DeclaredConstants(L=4.0, mu_max=3.0, K=2.0),
                hclass="degenerate",
            ),
        ),
        diffusions=(_scalar_sigma(math.sqrt(0.1)), DiffusionSpec()),
        coupling=CouplingMatrix.standard(2),
        initial=(_sin(1.0), _const(0.0)),
        convergence_supported=True,
        description="elliptic sublinear equation coupled to a degenerate quadratic one",
    )


def _control_pair(dim):
    zeros = tuple(_const(0.0) for _ in range(dim - 1))
    eq1 = Control(
        tuple(
            ControlOption(
                label=f"{th:+d}",
                drift=(XFunction("cos", amp=0.25 * th, offset=0.5 * th),) + zeros,
                cost=XFunction("cos", amp=0.3, offset=0.1 * th),
            )
            for th in (-1, 1)
        )
    )
    thetas = np.linspace(-2.0, 2.0, 9)
    eq2 = Control(
        tuple(
            ControlOption(
                label=f"{th:+.1f}",
                drift=(_const(2.0 * th),) + zeros,
                cost=XFunction("sin", amp=-0.3, offset=th * th),
            )
            for th in thetas
        )
    )
    return ModelSpec(
        name="control_pair",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sub=(eq1,),
                constants=DeclaredConstants(C_sub=0.75, C_bar=1.0, L=2.0, mu_max=3.0, K=2.0),
                hclass="elliptic",
            ),
            HamiltonianSpec(
                sup=(eq2,),
                constants=DeclaredConstants(L=3.0, mu_max=3.0, K=2.0),
                hclass="degenerate",
            ),
        ),
        diffusions=(_scalar_sigma(math.sqrt(0.1)), DiffusionSpec()),
        coupling=CouplingMatrix.standard(2),
        initial=(_cos(0.5), _const(0.0)),
        convergence_supported=True,
        description="switching control: bounded drift in mode 0, sampled quadratic control in mode 1",
    )


def _nonlip_quad(dim):
    return ModelSpec(
        name="nonlip_quad",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sup=(Power(_const(1.0), 2.0), BoundedCos(XFunction("sqrt_abs_sin", amp=0.5), 1.0)),
                constants=DeclaredConstants(C_sub=1.0, C_bar=1.5, L=2.0, mu_max=3.0, K=2.0),
                hclass="elliptic",
            ),
        ),
        diffusions=(_scalar_sigma(0.2),),
        coupling=CouplingMatrix.standard(1),
        initial=(_const(0.0),),
        convergence_supported=False,
        description="|p|^2 + h(x, p) with h bounded but not Lipschitz in x",
    )


def _sublinear_drift(dim):
    opts = tuple(
        ControlOption(f"{th:+d}", (_const(float(th)),) + tuple(_const(0.0) for _ in range(dim - 1)), _const(0.0))
        for th in (-1, 1)
    )
    return ModelSpec(
        name="sublinear_drift",
        dim=dim,
        hamiltonians=(
            HamiltonianSpec(
                sub=(Control(opts),),
                constants=DeclaredConstants(C_sub=1.0, C_bar=1.0, L=2.0, mu_max=2.0, K=1.0),
                hclass="elliptic",
            ),
        ),
        diffusions=(_scalar_sigma(math.sqrt(0.1)),),
        coupling=CouplingMatrix.standard(1),
        initial=(_cos(0.5),),
        convergence_supported=True,
        description="max over theta in {-1, +1} of -theta p",
    )


_REGISTRY: dict[str, Callable[[int], ModelSpec]] = {
    "constant_pair": lambda dim: constant_model(0.5, 2, dim),
    "linear_elliptic": _linear_elliptic,
    "eikonal_cos": _eikonal_cos,
    "typical_superlinear": _typical_superlinear,
    "asymmetric_pair": _asymmetric_pair,
    "control_pair": _control_pair,
    "nonlip_quad": _nonlip_quad,
    "sublinear_drift": _sublinear_drift,
}


def available_models() -> list[str]:
    return list(_REGISTRY)


def builtin(name: str, dim: int = 1) -> ModelSpec:
    """Registry lookup; ``dim=2`` gives the same model varying along axis 0."""
    if name not in _REGISTRY:
        raise UsageError(f"unknown model {name!r}; available: {', '.join(available_models())}")
    if dim not in (1, 2):
        raise UsageError("dim must be 1 or 2")
    return _REGISTRY[name](dim)
