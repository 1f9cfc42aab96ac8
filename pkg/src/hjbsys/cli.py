"""Config-driven experiment runner.

Usage::

    hjbsys run CONFIG [--out DIR] [--seed N] [--threads N]
    hjbsys validate CONFIG
    hjbsys list-models

Exit codes: 0 success, 1 usage or configuration error (also solver
breakdowns), 2 when a mathematical property check fails.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from .errors import HJBError, PropertyViolation, UsageError
from .grid import PeriodicGrid, SystemField, field_to_csv
from .model import CouplingMatrix, DiffusionSpec, XFunction, available_models, builtin, model_from_dict

__all__ = ["main", "run", "load_config", "resolve_config", "list_models", "MANIFEST_SCHEMA"]

MANIFEST_SCHEMA = 1
ENV_OUT = "HJBSYS_OUT"

TASK_DEFAULTS: dict[str, dict] = {
    "check": {"samples": 4000, "convergence": None},
    "stationary": {"epsilon": 0.1, "residual_tol": 1e-10, "max_iters": 500000,
                   "truncation_radius": None, "scheme": "upwind", "cfl_safety": 0.95},
    "sweep": {"epsilons": [0.5, 0.1, 0.02, 0.004], "residual_tol": 1e-10, "ratio_bound": 1.5,
              "trend_bound": 1.2, "scheme": "upwind", "cfl_safety": 0.95},
    "ergodic": {"schedule": [0.1, 0.02, 0.004, 0.001], "anchor": 0, "mode": "anchor",
                "ergodic_tol": 1e-3, "residual_tol": 1e-10, "refine": False, "scheme": "upwind"},
    "evolve": {"t_max": 1.0, "dt": None, "cfl_safety": 0.9, "snapshot_stride": None,
               "truncation_radius": None, "save_snapshots": False, "gradient_tol": 0.05},
    "longtime": {"schedule": [0.1, 0.02, 0.004, 0.001], "t_max": 20.0, "dt": None, "cfl_safety": 0.9,
                 "tol": 1e-2, "monotone_tol": 1e-8, "refine_threshold": 1e-8, "residual_tol": 1e-10},
    "smp": {"C": 1.0, "t_max": 30.0, "flat_tol": 1e-3, "dt": None, "cfl_safety": 0.9,
            "enforce_hypothesis": True, "decouple": False, "zero_diffusion": False},
    "mc": {"x0": None, "i0": 0, "T": 1.0, "samples": 10000, "dt": 1e-3, "policy": None,
           "batch_size": 1000, "pde_check": False, "allowance": 2e-2, "dump_paths": False},
}


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_config(path) -> dict:
    """Read a YAML or JSON config file."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        text = path.read_text()
        # YAML 1.1 reads 1e-10 as a string, so JSON goes through json
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return data


def resolve_config(raw: dict, seed: int | None = None) -> dict:
    """Fill every default explicitly and reject unknown keys."""
    cfg = copy.deepcopy(raw)
    allowed_top = {"model", "grid", "task", "seed", "output"}
    unknown = set(cfg) - allowed_top
    if unknown:
        raise UsageError(f"unknown top-level keys: {sorted(unknown)}")
    for key in ("model", "task"):
        if key not in cfg:
            raise UsageError(f"config needs a '{key}' section")
    model = cfg["model"]
    if isinstance(model, str):
        model = {"builtin": model}
    if not isinstance(model, dict) or ("builtin" not in model and "equations" not in model):
        raise UsageError("model section needs 'builtin' or an inline 'equations' list")
    grid = {"dim": 1, "n": 128, **(cfg.get("grid") or {})}
    if set(grid) - {"dim", "n"}:
        raise UsageError(f"unknown grid keys: {sorted(set(grid) - {'dim', 'n'})}")
    task = dict(cfg["task"]) if isinstance(cfg["task"], dict) else {"kind": cfg["task"]}
    kind = task.pop("kind", None)
    if kind not in TASK_DEFAULTS:
        raise UsageError(f"task.kind must be one of {sorted(TASK_DEFAULTS)}, got {kind!r}")
    extra = set(task) - set(TASK_DEFAULTS[kind])
    if extra:
        raise UsageError(f"unknown parameters for task {kind!r}: {sorted(extra)}")
    params = {**copy.deepcopy(TASK_DEFAULTS[kind]), **task}
    return {
        "model": model,
        "grid": grid,
        "task": {"kind": kind, **params},
        "seed": int(seed if seed is not None else cfg.get("seed", 0)),
        "output": cfg.get("output"),
    }


def build_model(section: dict, dim: int):
    if "builtin" in section:
        extra = set(section) - {"builtin", "initial", "dim"}
        if extra:
            raise UsageError(f"unknown keys next to 'builtin': {sorted(extra)}")
        model = builtin(section["builtin"], int(section.get("dim", dim)))
    else:
        model = model_from_dict({"dim": dim, **section})
    if section.get("initial") is not None and "builtin" in section:
        model = model.with_initial(section["initial"])
    if model.dim != dim:
        raise UsageError(f"model dim {model.dim} does not match grid dim {dim}")
    return model


class _Bundle:
    def __init__(self, out: Path):
        self.out = out
        self.files: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def add(self, path: Path) -> Path:
        self.files.append(Path(path))
        return path

    def json(self, name: str, payload) -> Path:
        path = self.out / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return self.add(path)

    def csv(self, name: str, header: list[str], rows) -> Path:
        path = self.out / name
        with path.open("w") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
        return self.add(path)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj)}")


def _run_task(cfg: dict, model, grid: PeriodicGrid, bundle: _Bundle, threads: int) -> dict:
    from . import assumptions, evolution, montecarlo, steady

    t = cfg["task"]
    kind = t["kind"]
    seed = cfg["seed"]
    if kind == "check":
        res = assumptions.lint(model, samples=t["samples"], seed=seed, convergence=t["convergence"])
        bundle.json("assumptions.json", [r.to_dict() for r in res.reports])
        return {"passed": res.passed, "failed": [f"{r.hypothesis}[{r.eq}]" for r in res.reports if not r.passed]}
    if kind == "stationary":
        dc = steady.DiscountedConfig(epsilon=t["epsilon"], residual_tol=t["residual_tol"],
                                     max_iters=t["max_iters"], truncation_radius=t["truncation_radius"],
                                     scheme=t["scheme"], cfl_safety=t["cfl_safety"])
        phi, rep = steady.solve_discounted(model, grid, dc)
        bundle.add(field_to_csv(phi, bundle.out / "phi.csv"))
        payload = rep.to_dict()
        payload.pop("wall_time")
        bundle.json("report.json", payload)
        return {"osc": rep.osc, "lipschitz": rep.lipschitz, "sup_eps_phi": rep.sup_eps_phi,
                "h_max": rep.h_max, "iterations": rep.iterations}
    if kind == "sweep":
        dc = steady.DiscountedConfig(residual_tol=t["residual_tol"], scheme=t["scheme"], cfl_safety=t["cfl_safety"])
        table, _ = steady.epsilon_sweep(model, grid, t["epsilons"], dc, t["ratio_bound"], t["trend_bound"])
        bundle.add(table.to_csv(bundle.out / "sweep.csv"))
        bundle.json("sweep.json", {"uniform": table.uniform})
        return {"uniform": table.uniform}
    if kind == "ergodic":
        dc = steady.DiscountedConfig(residual_tol=t["residual_tol"], scheme=t["scheme"])
        sol = steady.solve_ergodic(model, grid, t["schedule"], t["anchor"], t["mode"], dc,
                                   t["ergodic_tol"], refine=t["refine"])
        for p in sol.save(bundle.out):
            bundle.add(p)
        return sol.header()
    if kind == "evolve":
        ec = evolution.EvolutionConfig(t_max=t["t_max"], dt=t["dt"], cfl_safety=t["cfl_safety"],
                                       snapshot_stride=t["snapshot_stride"],
                                       truncation_radius=t["truncation_radius"], gradient_tol=t["gradient_tol"])
        ev = evolution.evolve(model, grid, None, ec)
        header = ["t"] + [f"lipschitz_{i + 1}" for i in range(model.m)]
        bundle.csv("evolution.csv", header, ([tt, *lip] for tt, lip in zip(ev.times, ev.lipschitz)))
        bundle.add(field_to_csv(ev.final, bundle.out / "final.csv"))
        if t["save_snapshots"]:
            snapdir = bundle.out / "snapshots"
            snapdir.mkdir(exist_ok=True)
            for k in range(len(ev.times)):
                bundle.add(field_to_csv(ev.field(k), snapdir / f"snapshot_{k:05d}.csv"))
        return {"dt": ev.dt, "steps": ev.n_steps, "gradient_bounded": ev.gradient_bounded,
                "max_lipschitz": float(ev.lipschitz.max())}
    if kind == "longtime":
        dc = steady.DiscountedConfig(residual_tol=t["residual_tol"])
        sol = steady.solve_ergodic(model, grid, t["schedule"], config=dc)
        ec = evolution.EvolutionConfig(t_max=t["t_max"], dt=t["dt"], cfl_safety=t["cfl_safety"])
        rep = evolution.long_time_report(model, grid, None, sol, ec, tol=t["tol"],
                                         monotone_tol=t["monotone_tol"], refine_threshold=t["refine_threshold"])
        bundle.add(rep.to_csv(bundle.out / "longtime.csv"))
        bundle.json("longtime.json", rep.summary())
        for p in sol.save(bundle.out):
            bundle.add(p)
        if not rep.converged:
            raise PropertyViolation("large_time_convergence",
                                    f"d(T)={rep.final_d:.3e} exceeds tolerance {t['tol']:.1e}")
        return rep.summary()
    if kind == "smp":
        lin = evolution.linearized_system(
            model, t["C"], CouplingMatrix(np.zeros((model.m, model.m))) if t["decouple"] else None)
        if t["zero_diffusion"]:
            lin = replace(lin, diffusions=tuple(DiffusionSpec() for _ in range(model.m)))
        u0 = model.initial_field(grid)
        sc = evolution.SmpConfig(t_max=t["t_max"], flat_tol=t["flat_tol"], dt=t["dt"],
                                 cfl_safety=t["cfl_safety"], enforce_hypothesis=t["enforce_hypothesis"])
        res = evolution.smp_probe(lin, grid, u0, sc)
        bundle.csv("smp.csv", ["t", "max", "range"], zip(res.times, res.max_series, res.range_series))
        out = {"flat": res.flat, "final_range": res.final_range, "max_nonincreasing": res.max_nonincreasing}
        bundle.json("smp.json", out)
        return out
    # mc
    x0 = t["x0"] if t["x0"] is not None else [0.0] * model.dim
    mcm = model
    policy = t["policy"]
    mc = montecarlo.McConfig(samples=t["samples"], dt=t["dt"], seed=seed, policy=policy,
                             batch_size=t["batch_size"], threads=threads)
    u0 = model.initial_field(grid)
    est = montecarlo.estimate_value(mcm, x0, t["i0"], t["T"], mc, u0)
    payload = est.to_dict()
    if t["pde_check"]:
        frozen = mcm.with_policy(policy) if policy is not None else mcm
        ev = evolution.evolve(frozen, grid, u0, evolution.EvolutionConfig(t_max=t["T"]))
        pde = float(grid.interpolate(ev.final.values[t["i0"]], np.atleast_2d(x0))[0])
        payload["pde_value"] = pde
        payload["consistent"] = bool(abs(est.mean - pde) <= 3 * est.stderr + t["allowance"])
    bundle.json("estimate.json", payload)
    if t["dump_paths"]:
        _, values, flips = montecarlo._run(mcm, x0, t["i0"], t["T"], mc, u0)
        bundle.csv("paths.csv", ["path", "value", "flips"], ((k, v, f) for k, (v, f) in enumerate(zip(values, flips))))
    if t["pde_check"] and not payload["consistent"]:
        raise PropertyViolation("mc_pde_consistency",
                                f"|MC - PDE| = {abs(est.mean - payload['pde_value']):.3e} above 3 stderr + allowance")
    return payload


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("artifact", "scipy", "pyyaml", "scikit-learn"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    return out


def run(config, out: str | os.PathLike | None = None, seed: int | None = None, threads: int = 1) -> dict:
    """Execute one experiment and write its bundle; returns the manifest.

    ``config`` is a path or an already loaded mapping.
    """
    raw = load_config(config) if not isinstance(config, dict) else config
    cfg = resolve_config(raw, seed)
    grid = PeriodicGrid(int(cfg["grid"]["dim"]), int(cfg["grid"]["n"]))
    model = build_model(cfg["model"], grid.dim)
    if out is None:
        out = cfg["output"]
    if out is None:
        root = Path(os.environ.get(ENV_OUT, "runs"))
        out = root / f"{model.name}_{cfg['task']['kind']}_seed{cfg['seed']}"
    bundle = _Bundle(Path(out))
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode()
    (bundle.out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    bundle.add(bundle.out / "config.json")
    start = time.perf_counter()
    status, exit_code, summary, error = "ok", 0, {}, None
    try:
        summary = _run_task(cfg, model, grid, bundle, threads)
    except PropertyViolation as exc:
        status, exit_code, error = "property_violation", 2, {"invariant": exc.invariant, "message": str(exc)}
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "config": cfg,
        "config_sha256": _hash_bytes(cfg_bytes),
        "model": model.name,
        "task": cfg["task"]["kind"],
        "seed": cfg["seed"],
        "threads": threads,
        "versions": _versions(),
        "wall_time": time.perf_counter() - start,
        "status": status,
        "exit_code": exit_code,
        "summary": summary,
        "error": error,
        "files": [
            {"path": str(p.relative_to(bundle.out)), "sha256": _hash_bytes(p.read_bytes())}
            for p in bundle.files
        ],
    }
    (bundle.out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return manifest


def list_models() -> str:
    rows = [("name", "m", "convergence_supported", "control_form")]
    for name in available_models():
        mdl = builtin(name)
        rows.append((name, str(mdl.m), str(mdl.convergence_supported).lower(), str(mdl.control_form).lower()))
    widths = [max(len(r[k]) for r in rows) for k in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hjbsys", description="Weakly coupled HJB system experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help=f"output directory (default: ${ENV_OUT} or ./runs)")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    v = sub.add_parser("validate", help="parse and resolve a config without running it")
    v.add_argument("config")
    sub.add_parser("list-models", help="show the builtin model registry")
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        if args.command == "list-models":
            print(list_models())
            return 0
        if args.command == "validate":
            cfg = resolve_config(load_config(args.config))
            grid = PeriodicGrid(int(cfg["grid"]["dim"]), int(cfg["grid"]["n"]))
            build_model(cfg["model"], grid.dim)
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        manifest = run(args.config, args.out, args.seed, args.threads)
        print(json.dumps({k: manifest[k] for k in ("model", "task", "status", "summary", "error")},
                         indent=2, sort_keys=True, default=_jsonable))
        if manifest["error"]:
            print(f"property violation: {manifest['error']['invariant']}", file=sys.stderr)
        return manifest["exit_code"]
    except (HJBError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, PropertyViolation) else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
