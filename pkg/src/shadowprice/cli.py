"""Command-line entry point: ``shadowprice {fit,bootstrap,simulate,solow}``.

Configs are JSON files.  Flags override environment variables, which
override config values.  Exit codes: 0 success, 1 configuration error,
2 data error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bootstrap import MAX_FAILURE_RATE as BOOT_FAILURE_RATE
from .bootstrap import BootstrapConfig, BootstrapFailure, run_bootstrap
from .dsl import RestrictionSystem
from .inference import SingularSystemError
from .kkt import CONSTRAINT_TOL, MAX_OUTER_ITER, STATIONARITY_TOL, InfeasibleToleranceError, KktConvergenceError
from .model import DataError, read_csv_dataset
from .montecarlo import MAX_FAILURE_RATE as STUDY_FAILURE_RATE
from .montecarlo import ScenarioSpec, StudyFailure, builtin_scenario, run_study
from .pipeline import PipelineConfig, estimate
from .solow import SolowConfig, run_solow
from .tolerance import GRID_LOWER_RATIO

__all__ = ["main", "build_parser", "SCHEMA_VERSION", "load_schema", "validate_report"]

SCHEMA_VERSION = "1.0.0"
ENV_OUT = "SHADOWPRICE_OUT"
ENV_WORKERS = "SHADOWPRICE_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
SOLVER_ERRORS = (
    KktConvergenceError,
    InfeasibleToleranceError,
    SingularSystemError,
    BootstrapFailure,
    StudyFailure,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ helpers


def load_schema() -> dict:
    return json.loads(resources.files("shadowprice").joinpath("data/report.schema.json").read_text())


def validate_report(report: dict) -> None:
    jsonschema.validate(report, load_schema())


def _clean(obj):
    """JSON-safe copy: numpy to builtins, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def _write_json(path: Path, report: dict) -> None:
    report = _clean(report)
    validate_report(report)
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")


def _read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        raise ConfigError("--config is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg, p.resolve().parent


def _resolve_path(value: str, base: Path) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _out_dir(args, cfg: dict, base: Path) -> Path:
    out = args.out or os.environ.get(ENV_OUT) or cfg.get("out")
    if not out:
        raise ConfigError("no output directory: pass --out, set SHADOWPRICE_OUT or give 'out' in the config")
    path = Path(out) if args.out or os.environ.get(ENV_OUT) else _resolve_path(out, base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _workers(args, cfg: dict) -> int:
    raw = args.workers if args.workers is not None else os.environ.get(ENV_WORKERS, cfg.get("workers", 1))
    try:
        w = int(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workers must be an integer, got {raw!r}") from exc
    if w < 1:
        raise ConfigError(f"workers must be at least 1, got {w}")
    return w


def _seed(args, cfg: dict, default: int = 0) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", default)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def _level(args, cfg: dict) -> float:
    level = args.level if args.level is not None else cfg.get("level", 0.95)
    if not isinstance(level, (int, float)) or not 0 < level < 1:
        raise ConfigError(f"level must lie in (0, 1), got {level!r}")
    return float(level)


def _bootstrap_settings(args, cfg: dict, force: bool) -> tuple[int, str, str]:
    boot = cfg.get("bootstrap", {})
    if isinstance(boot, int):
        boot = {"B": boot}
    if not isinstance(boot, dict):
        raise ConfigError("bootstrap must be an integer or an object")
    B = args.bootstrap if args.bootstrap is not None else boot.get("B", 200 if force else 0)
    law = boot.get("multiplier_law", "rademacher")
    centering = boot.get("centering", "fitted")
    if not isinstance(B, int) or B < 0:
        raise ConfigError(f"bootstrap B must be a non-negative integer, got {B!r}")
    if force and B < 1:
        raise ConfigError("the bootstrap command needs B >= 1")
    return B, law, centering


def _settings(pcfg: PipelineConfig, **extra) -> dict:
    out = {
        "c0": pcfg.c0,
        "grid_size": pcfg.grid_size,
        "grid": f"geometric on (c0*{GRID_LOWER_RATIO:g}, c0] plus h(theta_tilde) when interior",
        "search": pcfg.search,
        "level": pcfg.level,
        "screen_level": pcfg.screen_level,
        "min_plateau_size": 1,
        "plateau_variance": pcfg.plateau_variance,
        "interval_variance": pcfg.interval_variance,
        "score_covariance": "centered",
        "stationarity_tol": STATIONARITY_TOL,
        "constraint_tol": CONSTRAINT_TOL,
        "max_outer_iter": MAX_OUTER_ITER,
        "package_version": __version__,
    }
    out.update(extra)
    return out


# ------------------------------------------------------------------ commands


def _pipeline_config(cfg: dict, level: float) -> PipelineConfig:
    keys = ("c0", "grid_size", "screen_level", "search", "plateau_variance", "interval_variance")
    kw = {k: cfg[k] for k in keys if k in cfg}
    return PipelineConfig(level=level, **kw)


def _fit(args, force_bootstrap: bool) -> int:
    cfg, base = _read_config(args.config)
    known = {
        "data", "outcome", "regressors", "add_intercept", "restrictions", "labels", "sigma", "c0", "grid_size",
        "level", "screen_level", "search", "plateau_variance", "interval_variance", "bootstrap", "seed", "out", "workers",
    }
    extra = set(cfg) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for key in ("data", "outcome", "restrictions"):
        if key not in cfg:
            raise ConfigError(f"config is missing {key!r}")
    level = _level(args, cfg)
    seed = _seed(args, cfg)
    workers = _workers(args, cfg)
    B, law, centering = _bootstrap_settings(args, cfg, force_bootstrap)
    pcfg = _pipeline_config(cfg, level)
    bcfg = BootstrapConfig(B=B, multiplier_law=law, seed=seed, level=level, workers=workers, centering=centering) if B else None
    data_path = _resolve_path(cfg["data"], base)
    if not data_path.is_file():
        raise ConfigError(f"data file not found: {data_path}")
    restrictions = cfg["restrictions"]
    if not isinstance(restrictions, list) or not restrictions or not all(isinstance(r, str) for r in restrictions):
        raise ConfigError("restrictions must be a non-empty list of strings")
    out = _out_dir(args, cfg, base)

    data = read_csv_dataset(data_path, cfg["outcome"], cfg.get("regressors"), cfg.get("add_intercept", True))
    system = RestrictionSystem.from_strings(restrictions, data.p, cfg.get("sigma", "identity"), cfg.get("labels"))
    est = estimate(data, system, pcfg)
    boot = run_bootstrap(data, system, bcfg, pcfg, original=est) if bcfg else None

    members = boot.plateau_members() if boot is not None and boot.distribution is not None else est.isp.plateau_members
    boundary = boot.adjusted_boundary if boot is not None else None
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "bootstrap" if force_bootstrap else "fit",
        "settings": _settings(
            pcfg,
            seed=seed,
            bootstrap_B=B,
            multiplier_law=law if B else None,
            bootstrap_centering=centering if B else None,
            bootstrap_interval="percentile on debiased replications" if B else None,
            bootstrap_failure_limit=BOOT_FAILURE_RATE,
        ),
        "data": {"path": str(cfg["data"]), "outcome": cfg["outcome"], "n": data.n, "p": data.p, "columns": list(data.column_names)},
        "restrictions": list(system.labels),
        **_estimate_sections(est),
        "plateau_members": members,
        "plateau_rule": "bootstrap boundary" if boundary is not None else "point cutoff",
        "bootstrap": None if boot is None else boot.to_dict(),
    }
    _write_json(out / "report.json", report)
    est.curve.to_csv(out / "risk_curve.csv")
    est.isp.to_csv(out / "isp_sorted.csv", boundary=boundary)
    if boot is not None:
        boot.histogram_csv(out / "bootstrap_cutoffs.csv")
    return EXIT_OK


def _estimate_sections(est) -> dict:
    db = est.debiased
    return {
        "unrestricted": {"theta": est.theta_tilde, "h": est.h_tilde, "r2": est.r2_unrestricted},
        "tolerance": {
            "c_hat": est.c_hat,
            "active": est.solution.active,
            "risk": est.risk,
            "bias_proxy": est.bias_proxy,
            "var_proxy": est.var_proxy,
        },
        "solution": est.solution.to_dict(),
        "debiased": {
            "theta_db": db.theta_db,
            "bias_correction": db.bias_correction,
            "se": db.se,
            "ci_lower": db.ci_lower,
            "ci_upper": db.ci_upper,
            "level": db.level,
            "r2": est.r2_debiased,
        },
        "isp": est.isp.to_dict(),
    }


def cmd_fit(args) -> int:
    return _fit(args, force_bootstrap=False)


def cmd_bootstrap(args) -> int:
    return _fit(args, force_bootstrap=True)


def cmd_simulate(args) -> int:
    cfg, base = _read_config(args.config)
    cfg = dict(cfg)
    scenario = cfg.pop("scenario", None)
    out_key = cfg.pop("out", None)
    workers_key = cfg.pop("workers", None)
    if isinstance(scenario, int) or (isinstance(scenario, str) and scenario in ("case1", "case2", "case3")):
        case_id = scenario if isinstance(scenario, int) else int(scenario[-1])
        spec = builtin_scenario(case_id)
    elif isinstance(scenario, str):
        path = _resolve_path(scenario, base)
        if not path.is_file():
            raise ConfigError(f"scenario file not found: {path}")
        spec = ScenarioSpec.from_dict(json.loads(path.read_text()))
    elif scenario is None:
        spec = None
    else:
        raise ConfigError(f"scenario must be case1/case2/case3 or a file path, got {scenario!r}")
    overrides = dict(cfg)
    if args.seed is not None:
        overrides["seed"] = _seed(args, {})
    if args.level is not None:
        overrides["level"] = _level(args, {})
    if args.bootstrap is not None:
        overrides["bootstrap"] = args.bootstrap
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if "iterations" in overrides and (not isinstance(overrides["iterations"], int) or overrides["iterations"] < 1):
        raise ConfigError(f"iterations must be a positive integer, got {overrides['iterations']!r}")
    spec = ScenarioSpec.from_dict(overrides) if spec is None else ScenarioSpec.from_dict({**spec.to_dict(), **overrides})
    workers = _workers(args, {"workers": workers_key} if workers_key is not None else {})
    out = _out_dir(args, {"out": out_key} if out_key else {}, base)

    result = run_study(spec, workers=workers)
    pcfg = spec.pipeline_config()
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "settings": _settings(
            pcfg,
            seed=spec.seed,
            bootstrap_B=spec.bootstrap,
            multiplier_law=spec.multiplier_law if spec.bootstrap else None,
            bootstrap_interval="percentile on debiased replications" if spec.bootstrap else None,
            iteration_failure_limit=STUDY_FAILURE_RATE,
            plateau_membership="bootstrap boundary" if spec.bootstrap else "point cutoff",
            table1_membership_threshold=0.5,
        ),
        "study": result.to_dict(),
    }
    _write_json(out / "report.json", report)
    result.table1_csv(out / "table1.csv")
    result.table2_csv(out / "table2.csv")
    result.figure1_csv(out / "figure1.csv")
    return EXIT_OK


def cmd_solow(args) -> int:
    cfg, base = _read_config(args.config)
    cfg = dict(cfg)
    out_key = cfg.pop("out", None)
    workers_key = cfg.pop("workers", None)
    if "csv_path" not in cfg:
        raise ConfigError("config is missing 'csv_path'")
    if args.seed is not None:
        cfg["seed"] = _seed(args, {})
    if args.level is not None:
        cfg["level"] = _level(args, {})
    if args.bootstrap is not None:
        cfg["bootstrap"] = args.bootstrap
    scfg = SolowConfig.from_dict(cfg, base_dir=base)
    if not Path(scfg.csv_path).is_file():
        raise ConfigError(f"data file not found: {scfg.csv_path}")
    workers = _workers(args, {"workers": workers_key} if workers_key is not None else {})
    out = _out_dir(args, {"out": out_key} if out_key else {}, base)

    rep = run_solow(scfg, workers=workers)
    boundary = rep.bootstrap.adjusted_boundary if rep.bootstrap is not None else None
    body = rep.to_dict()
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": "solow",
        "settings": _settings(
            scfg.pipeline_config(),
            seed=scfg.seed,
            bootstrap_B=scfg.bootstrap,
            multiplier_law=scfg.multiplier_law if scfg.bootstrap else None,
            g_plus_delta=scfg.g_plus_delta,
            tau_list=list(scfg.tau_list),
        ),
        "data": {"path": str(cfg["csv_path"]), "n": body.pop("n"), "columns": body.pop("columns")},
        "restrictions": body.pop("restrictions"),
        "solow": body,
        "plateau_rule": "bootstrap boundary" if boundary is not None else "point cutoff",
    }
    _write_json(out / "report.json", report)
    rep.soft.curve.to_csv(out / "risk_curve.csv")
    rep.soft.isp.to_csv(out / "isp_sorted.csv", boundary=boundary)
    return EXIT_OK


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowprice", description="Soft-restriction estimation with shadow prices.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, help_text in (
        ("fit", cmd_fit, "estimate on a CSV dataset"),
        ("bootstrap", cmd_bootstrap, "estimate plus wild bootstrap"),
        ("simulate", cmd_simulate, "Monte Carlo study"),
        ("solow", cmd_solow, "growth regression with steady-state restrictions"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help=f"output directory (env {ENV_OUT})")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed")
        p.add_argument("--workers", type=int, help=f"worker processes (env {ENV_WORKERS})")
        p.add_argument("--bootstrap", type=int, metavar="B", help="bootstrap replications")
        p.add_argument("--level", type=float, help="confidence level")
        if name == "simulate":
            p.add_argument("--iterations", type=int, help="Monte Carlo iterations")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SOLVER_ERRORS as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
