"""Command-line front end for the adaptive studies.

Usage:
    dwr-adapt run <config> [--mode adaptive|uniform] [--max-dofs N] [--tol T]
                           [--out DIR] [--make-reference] [--dump-levels SPEC]
                           [--verbose]

``<config>`` is either a built-in experiment name (``example1``,
``example2``) or the path of a plain-text config file with ``key = value``
lines (``#`` comments); command-line flags override file values.  Exit codes:
0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import forms, newton, plots
from .adapt import AdaptiveAbort, AdaptiveLoop, LevelRecord, MarkingParams
from .dwr import estimate
from .mesh import DomainSpec, GeometryError, build_mesh, domain_from_file
from .space import build_space, dump_function_csv
from .forms import (PointValueGoal, ProductPointGoal, SquaredMeanDeviationGoal,
                    SubdomainIntegralGoal, Problem, manufactured_source)


class ConfigError(ValueError):
    pass


STAIRCASE = DomainSpec([(0.0, 0.0, 1.0, 1.0), (1.0, 0.0, 2.0, 1.0),
                        (1.0, 1.0, 2.0, 2.0), (2.0, 1.0, 3.0, 2.0),
                        (2.0, 2.0, 3.0, 3.0)])


@dataclass
class StudyConfig:
    experiment: str = "example1"
    p: float = 4.0
    eps: float = 1e-10
    mode: str = "adaptive"
    tol_dis: float = 0.0
    max_dofs: int = 20000
    refine_fraction: float = 0.1
    initial_refinements: int = 1
    domain: str = ""              # "", "unit-square", "staircase" or file:<path>
    source: str = ""              # "", "manufactured" or "constant:<v>"
    goals: tuple = ()             # goal spec strings
    reference: str = ""           # "", "exact-zero", "none" or file:<path>
    out: str = "out"
    dump_levels: str = "none"
    s_points: int = 5
    newton_tol: float = 1e-8
    verbose: bool = False


_DEFAULTS = {
    "example1": dict(
        domain="unit-square", source="manufactured",
        goals=("point:0,0",), reference="exact-zero",
    ),
    "example2": dict(
        domain="staircase", source="constant:1",
        goals=("product:2.9,2.1,2.1,2.9", "sqmean:2.5,2.5",
               "subdomain:2,2,3,3", "point:0.6,0.6"),
        reference="none",
    ),
}

_TYPES = {
    "p": float, "eps": float, "tol_dis": float, "max_dofs": int,
    "refine_fraction": float, "initial_refinements": int, "s_points": int,
    "newton_tol": float,
}


def parse_config_file(path) -> dict:
    """Parse ``key = value`` lines; report errors with line numbers."""
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot open config file {path}: {exc}") from exc
    with fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "goals":
                values["goals"] = tuple(g.strip() for g in value.split(";") if g.strip())
                continue
            if key not in StudyConfig.__dataclass_fields__:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            caster = _TYPES.get(key, str)
            try:
                values[key] = caster(value)
            except ValueError:
                raise ConfigError(
                    f"{path}:{ln}: cannot parse {value!r} as {caster.__name__}") from None
    return values


def load_config(name_or_path, overrides=None) -> StudyConfig:
    if name_or_path in _DEFAULTS:
        cfg = StudyConfig(experiment=name_or_path, **_DEFAULTS[name_or_path])
    else:
        values = parse_config_file(name_or_path)
        experiment = values.pop("experiment", "custom")
        base = _DEFAULTS.get(experiment, {})
        cfg = StudyConfig(experiment=experiment, **{**base, **values})
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg


def parse_goal(spec: str):
    kind, _, rest = spec.partition(":")
    try:
        args = [float(v) for v in rest.split(",")] if rest else []
        if kind == "point" and len(args) == 2:
            return PointValueGoal(args[0], args[1])
        if kind == "product" and len(args) == 4:
            return ProductPointGoal((args[0], args[1]), (args[2], args[3]))
        if kind == "sqmean" and len(args) == 2:
            return SquaredMeanDeviationGoal((args[0], args[1]))
        if kind == "subdomain" and len(args) == 4:
            return SubdomainIntegralGoal(tuple(args))
    except ValueError:
        pass
    raise ConfigError(f"cannot parse goal spec {spec!r}")


def _build_domain(cfg: StudyConfig) -> DomainSpec:
    d = cfg.domain or "unit-square"
    if d == "unit-square":
        return DomainSpec([(-1.0, -1.0, 1.0, 1.0)])
    if d == "staircase":
        return STAIRCASE
    if d.startswith("file:"):
        return domain_from_file(d[5:])
    raise ConfigError(f"unknown domain {cfg.domain!r}")


def _build_problem(cfg: StudyConfig) -> Problem:
    src = cfg.source or "constant:1"
    if src == "manufactured":
        base = Problem(p=cfg.p, eps=cfg.eps)
        return Problem(p=cfg.p, eps=cfg.eps, f=manufactured_source(base))
    if src.startswith("constant:"):
        return Problem(p=cfg.p, eps=cfg.eps, f=float(src.split(":", 1)[1]))
    raise ConfigError(f"unknown source {cfg.source!r}")


def _load_reference(cfg: StudyConfig, n_goals: int):
    ref = cfg.reference or "none"
    if ref == "none":
        return None
    if ref == "exact-zero":
        return [0.0] * n_goals
    if ref.startswith("file:"):
        path = ref[5:]
        try:
            fh = open(path)
        except OSError as exc:
            raise ConfigError(f"missing reference file {path}: {exc}") from exc
        values = {}
        with fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    name, _, val = line.partition("=")
                    values[name.strip()] = float(val)
                except ValueError:
                    raise ConfigError(f"{path}:{ln}: cannot parse {raw!r}") from None
        try:
            return [values[f"J{k + 1}"] for k in range(n_goals)]
        except KeyError as exc:
            raise ConfigError(f"{path}: missing reference value {exc}") from None
    raise ConfigError(f"unknown reference spec {cfg.reference!r}")


# -- output writers ----------------------------------------------------------

def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_levels_csv(records, path):
    with open(path, "w") as fh:
        fh.write(",".join(LevelRecord.CSV_FIELDS) + "\n")
        for r in records:
            fh.write(",".join(_fmt(getattr(r, f)) for f in LevelRecord.CSV_FIELDS) + "\n")


def read_levels_csv(path):
    """Parse levels.csv back into LevelRecord objects (CSV fields only)."""
    records = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != LevelRecord.CSV_FIELDS:
            raise ConfigError(f"{path}: unexpected header {header}")
        for line in fh:
            vals = line.strip().split(",")
            kwargs = {}
            for name, val in zip(LevelRecord.CSV_FIELDS, vals):
                if name in ("level", "dofs", "newton_base", "newton_enriched"):
                    kwargs[name] = int(val)
                else:
                    kwargs[name] = float(val)
            records.append(LevelRecord(**kwargs))
    return records


def write_goal_errors_csv(records, goal_names, path):
    n = len(goal_names)
    with open(path, "w") as fh:
        cols = ["level", "dofs", "b_h_hat", "no_cancellation"]
        for k in range(n):
            cols += [f"J{k + 1}_tilde", f"J{k + 1}_enriched", f"J{k + 1}_ref",
                     f"J{k + 1}_rel_err"]
        fh.write(",".join(cols) + "\n")
        for r in records:
            row = [str(r.level), str(r.dofs), _fmt(r.b_h_hat),
                   str(int(r.no_cancellation_ok))]
            for k in range(n):
                ref = r.goal_reference[k] if r.goal_reference else float("nan")
                rel = (abs(ref - r.goal_values[k]) / abs(ref)
                       if ref and math.isfinite(ref) else float("nan"))
                row += [_fmt(r.goal_values[k]), _fmt(r.goal_values_enriched[k]),
                        _fmt(ref), _fmt(rel)]
            fh.write(",".join(row) + "\n")


def write_indicators_csv(mesh, est, path):
    with open(path, "w") as fh:
        fh.write(f"# eta2={_fmt(est.eta2)} eta_h2={_fmt(est.eta_h2)} "
                 f"eta_k={_fmt(est.eta_k)} eta_R={_fmt(est.eta_R)}\n")
        fh.write("cell_id,level,eta_K,eta_R_K\n")
        levels = mesh.levels()
        for k, cid in enumerate(mesh.active_ids):
            fh.write(f"{int(cid)},{int(levels[k])},{_fmt(est.element_indicators[k])},"
                     f"{_fmt(est.element_remainders[k])}\n")


def _dump_wanted(spec, level, is_last):
    if spec == "none":
        return False
    if spec == "all":
        return True
    if spec == "last":
        return is_last
    return str(level) in {s.strip() for s in spec.split(",")}


# -- study drivers --------------------------------------------------------------

def make_reference(cfg: StudyConfig, out_dir):
    """Uniform enriched-space reference: refine while the dof budget allows,
    solve once, and write the goal values."""
    domain = _build_domain(cfg)
    problem = _build_problem(cfg)
    goals = [parse_goal(g) for g in cfg.goals]
    mesh = build_mesh(domain, cfg.initial_refinements)
    while True:
        nxt = mesh.refine(mesh.active_ids)
        if build_space(nxt, 2).dof_count > cfg.max_dofs:
            break
        mesh = nxt
    space = build_space(mesh, 2)
    u, _ = newton.newton_solve(problem, space, tol=cfg.newton_tol)
    path = os.path.join(out_dir, "reference.txt")
    with open(path, "w") as fh:
        fh.write(f"# uniform enriched-space reference, dofs={space.dof_count}\n")
        for k, g in enumerate(goals):
            fh.write(f"J{k + 1} = {g.value(u):.17g}\n")
    return path


def run_study(cfg: StudyConfig):
    """Run one study and write CSVs and figures; returns the level records."""
    domain = _build_domain(cfg)
    problem = _build_problem(cfg)
    goals = [parse_goal(g) for g in cfg.goals]
    if not goals:
        raise ConfigError("no goals configured")
    reference = _load_reference(cfg, len(goals))
    os.makedirs(cfg.out, exist_ok=True)
    mesh = build_mesh(domain, cfg.initial_refinements)
    loop = AdaptiveLoop(
        problem, goals, mesh, params=MarkingParams(refine_fraction=cfg.refine_fraction),
        tol_dis=cfg.tol_dis, max_dofs=cfg.max_dofs, mode=cfg.mode,
        reference=reference, s_points=cfg.s_points, newton_tol=cfg.newton_tol,
        log_fn=(print if cfg.verbose else None),
    )
    records = []
    try:
        while not loop.finished and loop.level <= loop.max_levels:
            rec = loop.step()
            records.append(rec)
            if _dump_wanted(cfg.dump_levels, rec.level, loop.finished):
                write_indicators_csv(loop.u_prev.space.mesh, loop._estimate,
                                     os.path.join(cfg.out, f"indicators_{rec.level}.csv"))
                dump_function_csv(loop.u_prev,
                                  os.path.join(cfg.out, f"solution_{rec.level}.csv"))
    finally:
        if records:
            write_levels_csv(records, os.path.join(cfg.out, "levels.csv"))
            plots.render_error_plot(records, os.path.join(cfg.out, "error_vs_dofs.png"))
            plots.render_effectivity_plot(
                records, os.path.join(cfg.out, "effectivity_vs_dofs.png"))
            if len(goals) > 1:
                write_goal_errors_csv(records, [g.name for g in goals],
                                      os.path.join(cfg.out, "goal_errors.csv"))
    return records


def slope(records, window):
    """Least-squares slope of log(exact error) against log(DOFs) over the last
    ``window`` records; nonpositive or non-finite errors are excluded."""
    pts = [(r.dofs, abs(r.exact_error)) for r in records[-window:]
           if math.isfinite(r.exact_error) and abs(r.exact_error) > 0]
    if len(pts) < 3:
        raise ValueError("slope needs at least 3 records with positive errors")
    x = np.log([p[0] for p in pts])
    y = np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


# -- entry point ---------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dwr-adapt",
        description="Goal-oriented adaptive solver for the regularized p-Laplacian")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run a study from a config name or file")
    run_p.add_argument("config", help="example1, example2 or a config file path")
    run_p.add_argument("--mode", choices=["adaptive", "uniform"], default=None)
    run_p.add_argument("--max-dofs", type=int, default=None)
    run_p.add_argument("--tol", type=float, default=None)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--make-reference", action="store_true",
                       help="compute a uniform enriched-space reference and exit")
    run_p.add_argument("--reference", default=None,
                       help="exact-zero, none or file:<path>")
    run_p.add_argument("--dump-levels", default=None,
                       help="none, last, all or a comma list of levels")
    run_p.add_argument("--s-points", type=int, default=None)
    run_p.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, overrides={
            "mode": args.mode, "max_dofs": args.max_dofs, "tol_dis": args.tol,
            "out": args.out, "dump_levels": args.dump_levels,
            "s_points": args.s_points, "reference": args.reference,
            "verbose": True if args.verbose else None,
        })
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        os.makedirs(cfg.out, exist_ok=True)
        if args.make_reference:
            path = make_reference(cfg, cfg.out)
            print(f"reference written to {path}")
            return 0
        records = run_study(cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AdaptiveAbort, newton.SolverError, newton.NewtonError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    print(f"{len(records)} levels written to {cfg.out}/levels.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
