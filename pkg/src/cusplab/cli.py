"""Command-line entry point ``cusplab``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import action, oracle
from .action import BranchGrid, dumps, write_table_csv
from .errors import ConfigError, NumericalError, ValidationError
from .exprlang import DomainError, ExprError, parse
from .model import ParabolicModel, bifurcation_diagram, write_bifurcation_csv

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("bifurcation", "roundtrip", "scan", "suspend", "negcontrol")


@dataclass
class Config:
    model: dict = field(default_factory=lambda: {"g": "1", "A": "0", "B": "0", "radius": 1.2})
    map: dict = field(default_factory=lambda: {"type": "oracle", "v": "0.1"})
    grids: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    seed: int = 0
    output: str = "cusplab-out"
    bifurcation: dict = field(default_factory=lambda: {"lambda_max": 0.75, "n": 16})
    suspension: dict = field(default_factory=lambda: {"starts": 50, "near": 10})
    negcontrol: dict = field(default_factory=lambda: {"radii": [1e-1, 1e-2, 1e-3]})

    def echo(self):
        return {
            "model": self.model,
            "map": self.map,
            "grids": self.grids,
            "tolerances": self.tolerances,
            "seed": self.seed,
            "bifurcation": self.bifurcation,
            "suspension": self.suspension,
            "negcontrol": self.negcontrol,
        }


def _bounds(obj, key, default, pair=True):
    b = obj.get(key, default)
    try:
        if pair:
            b = [tuple(float(v) for v in b[0]), tuple(float(v) for v in b[1])]
            if not all(lo < hi for lo, hi in b):
                raise ValueError
        else:
            b = (float(b[0]), float(b[1]))
            if not b[0] < b[1]:
                raise ValueError
    except (TypeError, ValueError, IndexError):
        raise ConfigError(f"bad bounds {b!r}") from None
    return b


def _count(obj, key, default):
    n = obj.get(key, default)
    if not isinstance(n, int) or isinstance(n, bool) or n < 2:
        raise ConfigError(f"grid count {key} must be an integer >= 2, got {n!r}")
    return n


def load_config(path) -> Config:
    cfg = Config()
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(Config.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for k, v in raw.items():
            if k in ("model", "map", "bifurcation", "suspension", "negcontrol"):
                if not isinstance(v, dict):
                    raise ConfigError(f"{k} must be an object")
                merged = dict(getattr(cfg, k)) if k != "map" else {}
                merged.update(v)
                setattr(cfg, k, merged)
            else:
                setattr(cfg, k, v)
    _check(cfg)
    return cfg


def _check(cfg: Config):
    for key in ("g", "A", "B"):
        try:
            parse(str(cfg.model.get(key, "0" if key != "g" else "1")))
        except ExprError as exc:
            raise ConfigError(f"model.{key}: {exc}") from None
    r = cfg.model.get("radius", 1.2)
    if not isinstance(r, (int, float)) or not r > 0:
        raise ConfigError("model.radius must be a positive number")
    kind = cfg.map.get("type")
    if kind not in ("identity", "oracle", "explicit"):
        raise ConfigError(f"map.type must be identity, oracle or explicit, got {kind!r}")
    for key in ("v", "mu_x", "mu_y"):
        if key in cfg.map:
            try:
                parse(str(cfg.map[key]))
            except ExprError as exc:
                raise ConfigError(f"map.{key}: {exc}") from None
    if not isinstance(cfg.tolerances, dict):
        raise ConfigError("tolerances must be an object")
    for k, v in cfg.tolerances.items():
        if not isinstance(v, (int, float)) or not v > 0:
            raise ConfigError(f"tolerance {k} must be positive")
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    if not isinstance(cfg.grids, dict):
        raise ConfigError("grids must be an object")
    section_grid(cfg), branch_grid(cfg), fiber_grid(cfg)
    n = cfg.bifurcation.get("n")
    if not isinstance(n, int) or n < 2:
        raise ConfigError("bifurcation.n must be an integer >= 2")
    lm = cfg.bifurcation.get("lambda_max")
    if not isinstance(lm, (int, float)) or not lm > 0:
        raise ConfigError("bifurcation.lambda_max must be positive")


def section_grid(cfg):
    g = cfg.grids.get("section", {})
    b = _bounds(g, "bounds", [[-0.4, 0.4], [-0.4, 0.4]])
    return oracle.SectionGrid(_count(g, "ny", 40), _count(g, "nlambda", 40), b[0], b[1])


def branch_grid(cfg):
    g = cfg.grids.get("branch", {})
    b = _bounds(g, "bounds", [[-0.3, 0.3], [-0.4, 0.5]])
    return BranchGrid(b[0], b[1], _count(g, "nh", 13), _count(g, "nlambda", 11))


def fiber_grid(cfg):
    g = cfg.grids.get("fiber", {})
    b = _bounds(g, "bounds", [-0.4, 0.4], pair=False)
    return oracle.FiberGrid(_count(g, "nx", 20), _count(g, "ny", 20), _count(g, "nlambda", 20), b)


def build_model(cfg) -> ParabolicModel:
    m = cfg.model
    try:
        return ParabolicModel.create(m.get("g", "1"), m.get("A", "0"), m.get("B", "0"), m.get("radius", 1.2))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def build_spec(cfg, jobs) -> oracle.ExperimentSpec:
    model = build_model(cfg)
    mp = cfg.map
    mu = oracle.map_from_config(model, mp["type"], mp.get("v"), mp.get("mu_x"), mp.get("mu_y"), cfg.tolerances)
    return oracle.ExperimentSpec(
        model,
        mu,
        section_grid(cfg),
        branch_grid(cfg),
        fiber_grid(cfg),
        dict(cfg.tolerances),
        seed=cfg.seed,
        jobs=jobs,
    )


def report(experiment, cfg, defects, passed, **extra):
    out = {"experiment": experiment, "config": cfg.echo(), "defects": defects, "pass": bool(passed)}
    out.update(extra)
    return out


# ---------------------------------------------------------------- commands


def cmd_bifurcation(cfg, out: Path, jobs):
    rows = bifurcation_diagram(cfg.bifurcation["lambda_max"], cfg.bifurcation["n"])
    write_bifurcation_csv(out / "bifurcation.csv", rows)
    return True, ["bifurcation.csv"]


def cmd_roundtrip(cfg, out: Path, jobs):
    spec = build_spec(cfg, jobs)
    rep = oracle.roundtrip(spec)
    ok = oracle.roundtrip_pass(rep, spec)
    ratio = _parabolic_ratio(spec)
    indicators = {
        "second_difference_ratio": rep.scan["second_difference"]["ratio"],
        "directional_ratio": ratio,
    }
    if ratio is not None:
        ok = ok and 0.98 <= ratio <= 1.02
    doc = report("roundtrip", cfg, rep.defects, ok, indicators=indicators, eta=rep.eta, convention=rep.convention)
    (out / "roundtrip.json").write_text(dumps(doc) + "\n")
    write_table_csv(out / "branch_outer.csv", rep.outer)
    write_table_csv(out / "branch_swallowtail.csv", rep.swallowtail)
    return ok, ["roundtrip.json", "branch_outer.csv", "branch_swallowtail.csv"]


def _parabolic_ratio(spec):
    if spec.map.kind == action.MapKind.IDENTITY:
        return None
    val = oracle.parabolic_ratio(spec.model, spec.map)
    return val if math.isfinite(val) else None


def cmd_scan(cfg, out: Path, jobs):
    spec = build_spec(cfg, jobs)
    if spec.branch.lam_bounds[1] <= 0:
        raise ConfigError("branch grid excludes lambda > 0: the swallowtail sheet is empty")
    outer, swallow, consist = action.branch_tables(spec.model, spec.map, spec.branch)
    scan = action.smoothness_scan(spec.model, spec.map, tolerances=spec.tolerances)
    defects = {
        "oval_consistency": consist,
        "boundary_derivative_mismatch": scan["branch_mismatch"],
        "parabola_residual": scan["parabola_residual"],
        "hadamard_agreement": {k: scan["hadamard_agreement"][k] for k in ("max", "at")},
    }
    ok = scan["pass"] and consist["max"] <= spec.tol("oval_consistency")
    doc = report(
        "scan",
        cfg,
        defects,
        ok,
        second_difference=scan["second_difference"],
        cusp_continuity=scan["cusp_continuity"],
        convention=scan["convention"],
    )
    (out / "smoothness.json").write_text(dumps(doc) + "\n")
    write_table_csv(out / "derivatives_outer.csv", outer)
    write_table_csv(out / "derivatives_swallowtail.csv", swallow)
    return ok, ["smoothness.json", "derivatives_outer.csv", "derivatives_swallowtail.csv"]


def cmd_suspend(cfg, out: Path, jobs):
    spec = build_spec(cfg, jobs)
    n = int(cfg.suspension.get("starts", 50))
    near = int(cfg.suspension.get("near", 10))
    if not 0 <= near <= n:
        raise ConfigError("suspension.near must be between 0 and suspension.starts")
    starts = cfg.suspension.get("points")
    if starts is None:
        starts = oracle.suspension_starts(n, near, seed=cfg.seed)
    rep = oracle.suspend(spec, starts)
    s = rep.summary()
    defects = {k: s[k] for k in ("period_defect", "h_drift", "lambda_drift")}
    ok = s["period_defect"]["max"] <= spec.tol("suspension") and s["freeness"]["min"] >= 0.5
    doc = report("suspend", cfg, defects, ok, freeness=s["freeness"])
    (out / "suspension.json").write_text(dumps(doc) + "\n")
    return ok, ["suspension.json"]


def cmd_negcontrol(cfg, out: Path, jobs):
    radii = tuple(float(r) for r in cfg.negcontrol.get("radii", (1e-1, 1e-2, 1e-3)))
    if not radii or any(r <= 0 for r in radii):
        raise ConfigError("negcontrol.radii must be positive")
    nc = oracle.negative_control(radii)
    r = nc["ratio_at_smallest"]
    ok = (
        1.38 <= r <= 1.45
        and abs(nc["period_scaling"] - 0.25) <= 1e-6
        and all(abs(g - 1) <= 0.02 for g in nc["gradient_ratio"])
    )
    defects = {
        "ratio_gap_to_sqrt2": {"max": abs(r - math.sqrt(2)), "at": [radii[-1]]},
        "period_scaling": {"max": abs(nc["period_scaling"] - 0.25), "at": [1.0, 16.0]},
        "gradient_ratio": {"max": max(abs(g - 1) for g in nc["gradient_ratio"]), "at": [radii[-1]]},
    }
    doc = report("negcontrol", cfg, defects, ok, **nc)
    (out / "negcontrol.json").write_text(dumps(doc) + "\n")
    return ok, ["negcontrol.json"]


HANDLERS = {
    "bifurcation": cmd_bifurcation,
    "roundtrip": cmd_roundtrip,
    "scan": cmd_scan,
    "suspend": cmd_suspend,
    "negcontrol": cmd_negcontrol,
}


def build_parser():
    p = argparse.ArgumentParser(prog="cusplab", description="Circle-action experiments near a parabolic orbit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    p.add_argument("--out", help="output directory (overrides config 'output')")
    p.add_argument("--seed", type=int, help="seed for randomized sampling (overrides config)")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available CPUs)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        out = Path(args.out or cfg.output)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory: {exc}") from None
        ok, files = HANDLERS[args.command](cfg, out, jobs)
    except ConfigError as exc:
        print(f"cusplab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValidationError, DomainError) as exc:
        print(f"cusplab: verification failure: {exc}", file=sys.stderr)
        for name, d in getattr(exc, "defects", {}).items():
            print(f"  {name}: {d}", file=sys.stderr)
        return EXIT_VERIFY
    except NumericalError as exc:
        print(f"cusplab: numerical failure: {exc}", file=sys.stderr)
        point = getattr(exc, "point", None)
        if point is not None:
            print(f"  at point {tuple(float(c) for c in point)}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"cusplab: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - t0
    status = "pass" if ok else "FAIL"
    print(f"{args.command}: {status} ({wall:.2f} s) -> {', '.join(str(out / f) for f in files)}")
    return EXIT_OK if ok else EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
