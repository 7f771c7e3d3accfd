"""Command-line front end.

Subcommands: ``estimate``, ``simulate``, ``coverage`` and ``power``. Options come
from a YAML (or JSON) config file and are overridden by flags. Every run writes
``manifest.json`` whose ``config`` entry reproduces the run when passed back
through ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
import yaml

from . import __version__
from .core_data import ConfigError, HeterogeneitySpec, load_csv, write_csv
from .nuisance_learners import LearnerConfig
from .orthogonal_scores import ScoreSettings
from .pipeline import SPLINE_CANDIDATES, EstimationSettings, estimate
from .roy_simulator import (COVERAGE_GRID, RoyConfig, StudySettings, analytic_bounds,
                            run_replications, simulate, summarize_bands, summarize_coverage,
                            summarize_power, true_theta)
from .series_projection import BasisSpec

SUBCOMMANDS = ("estimate", "simulate", "coverage", "power")
CONFIG_KEYS = {"alpha", "folds", "seed", "threads", "grid", "bootstrap_reps", "reps", "out",
               "command", "data", "schema", "heterogeneity", "learners", "basis", "scores",
               "inference", "roy", "study"}
FMT = "{:.10g}"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FMT.format(float(v))


def write_table(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def parse_grid(text) -> list:
    """``"0.1,0.2,0.3"`` or ``"start:stop:num"``; lists pass through."""
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    if isinstance(text, dict):
        return np.linspace(float(text["start"]), float(text["stop"]), int(text["num"])).tolist()
    text = str(text)
    if ":" in text:
        a, b, m = text.split(":")
        return np.linspace(float(a), float(b), int(m)).tolist()
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetbounds", description="Heterogeneous treatment-effect bounds under sample selection.")
    p.add_argument("--version", action="version", version=f"hetbounds {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML or JSON config file (a manifest.json works too)")
        s.add_argument("--alpha", type=float)
        s.add_argument("--folds", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--grid", help="comma list or start:stop:num")
        s.add_argument("--bootstrap-reps", type=int, dest="bootstrap_reps")
        s.add_argument("--reps", type=int, help="replications for coverage/power studies")
        s.add_argument("--n", type=int, help="sample size for simulation subcommands")
        s.add_argument("--out", type=Path)
    return p


def load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return dict(data.get("config", data))


def resolve(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("alpha", "folds", "seed", "threads", "bootstrap_reps", "reps"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    if args.grid is not None:
        cfg["grid"] = args.grid
    if args.n is not None:
        cfg.setdefault("roy", {})["n"] = args.n
    if args.out is not None:
        cfg["out"] = str(args.out)
    if "grid" in cfg:
        cfg["grid"] = parse_grid(cfg["grid"])
    cfg["command"] = args.command
    return cfg


def _subset(cls, mapping: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(mapping)


def _learner(cfg: dict, **defaults) -> LearnerConfig:
    opts = {**defaults, **_subset(LearnerConfig, cfg.get("learners", {}))}
    if "grid" in opts:
        opts["grid"] = tuple(opts["grid"])
    opts.setdefault("seed", int(cfg.get("seed", 0)))
    return LearnerConfig(**opts)


def _candidates(cfg: dict) -> tuple:
    basis = cfg.get("basis", {})
    if "candidates" not in basis:
        return SPLINE_CANDIDATES
    return tuple(BasisSpec(**_subset(BasisSpec, c)) for c in basis["candidates"])


def _score(cfg: dict) -> ScoreSettings:
    return ScoreSettings(**_subset(ScoreSettings, cfg.get("scores", {})))


def _inference(cfg: dict) -> dict:
    inf = dict(cfg.get("inference", {}))
    unknown = set(inf) - {"event", "method", "band_alpha"}
    if unknown:
        raise ConfigError(f"unknown inference keys: {sorted(unknown)}")
    return inf


def _roy(cfg: dict) -> RoyConfig:
    opts = _subset(RoyConfig, cfg.get("roy", {}))
    opts.setdefault("seed", int(cfg.get("seed", 0)))
    if "mu1" in opts:
        opts["mu1"] = tuple(opts["mu1"])
    return RoyConfig(**opts)


def _out_dir(cfg: dict) -> Path:
    if "out" not in cfg:
        raise ConfigError("an output directory is required (--out or 'out' in the config)")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, cfg: dict, extra: dict) -> None:
    clean = {k: v for k, v in cfg.items() if k != "out"}
    body = {
        "config": clean,
        "versions": {"hetbounds": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _het_spec(cfg: dict, columns) -> HeterogeneitySpec:
    het = cfg.get("heterogeneity", {})
    cols = het.get("columns", [0])
    idx = []
    for c in cols:
        if isinstance(c, str):
            if c not in columns:
                raise ConfigError(f"heterogeneity column {c!r} not among covariates {list(columns)}")
            idx.append(columns.index(c))
        else:
            idx.append(int(c))
    return HeterogeneitySpec(tuple(idx), tuple(het.get("kinds", ())))


def cmd_estimate(cfg: dict) -> int:
    data = cfg.get("data")
    if not data or "path" not in data:
        raise ConfigError("estimate needs data.path in the config")
    if "schema" not in cfg:
        raise ConfigError("estimate needs a schema mapping in the config")
    out = _out_dir(cfg)
    table = load_csv(data["path"], cfg["schema"], data.get("delimiter", ","))
    het = _het_spec(cfg, list(table.columns))
    inf = _inference(cfg)
    settings = EstimationSettings(
        alpha=float(cfg.get("alpha", 0.05)), folds=int(cfg.get("folds", 10)),
        learner=_learner(cfg), score=_score(cfg), candidates=_candidates(cfg),
        shared_basis=bool(cfg.get("basis", {}).get("shared", False)),
        event=inf.get("event", "relaxed"), cv_method=inf.get("method", "quadrature"),
        bootstrap_reps=int(cfg.get("bootstrap_reps", 0)), band_alpha=inf.get("band_alpha"),
        seed=int(cfg.get("seed", 0)))
    z = het.values(table)
    if "grid" in cfg:
        grid = np.asarray(cfg["grid"], dtype=float)
    elif z.shape[1] == 1 and het.kinds[0] == "continuous":
        grid = np.linspace(z.min(), z.max(), 50)
    else:
        grid = np.unique(z, axis=0)
    res = estimate(table, het, settings, grid)
    pts, iv = res.points, res.intervals
    write_table(out / "curves.csv", ["z", "theta_L", "theta_U", "sigma_L", "sigma_U", "rho"],
                zip(pts.z, pts.theta_L, pts.theta_U, pts.sigma_L, pts.sigma_U, pts.rho))
    write_table(out / "intervals.csv",
                ["z", "theta_L", "theta_U", "theta_star", "ci_lo", "ci_hi", "c_hat", "rho"], iv.rows())
    summary = res.summary()
    write_table(out / "summary.csv", ["theta_L", "theta_U", "n"],
                [(summary["theta_L"], summary["theta_U"], summary["n"])])
    extra = {"selection": res.selection, "nuisance": {"learner": res.nuisance.learner_tag,
             **{k: v for k, v in res.nuisance.diagnostics.items() if k != "folds"}}}
    if res.band is not None:
        write_table(out / "bands.csv", ["z", "band_lo", "band_hi"],
                    zip(res.band.z, res.band.lo, res.band.hi))
        extra["bootstrap"] = {"c_lower": res.band.c_lower, "c_upper": res.band.c_upper,
                              "discarded": res.bootstrap.discarded,
                              "skipped_points": res.bootstrap.skipped_points}
    _manifest(out, cfg, extra)
    print(f"unconditional bounds: [{summary['theta_L']:.6g}, {summary['theta_U']:.6g}] (n={summary['n']})")
    return 0


def _study(cfg: dict) -> StudySettings:
    study = dict(cfg.get("study", {}))
    inf = _inference(cfg)
    nuisance = study.pop("nuisance", "parametric")
    unknown = set(study) - {"candidates"}
    if unknown:
        raise ConfigError(f"unknown study keys: {sorted(unknown)}")
    return StudySettings(
        alpha=float(cfg.get("alpha", 0.05)), folds=int(cfg.get("folds", 2)), nuisance=nuisance,
        learner=_learner(cfg, quantile_degree=3), candidates=_candidates(cfg),
        z_grid=tuple(cfg.get("grid", COVERAGE_GRID)),
        bootstrap_reps=int(cfg.get("bootstrap_reps", 0)),
        band_alpha=float(inf.get("band_alpha", 0.10)), event=inf.get("event", "relaxed"),
        score=_score(cfg))


def _reps(cfg: dict, default: int) -> int:
    reps = int(cfg.get("reps", default))
    if reps < 1:
        raise ConfigError(f"reps must be at least 1, got {reps}")
    return reps


def _threads(cfg: dict) -> int:
    return int(cfg.get("threads") or os.cpu_count() or 1)


def cmd_simulate(cfg: dict) -> int:
    out = _out_dir(cfg)
    roy = _roy(cfg)
    table = simulate(roy)
    schema = write_csv(table, out / "data.csv")
    schema.update({"categorical": []})
    grid = np.asarray(cfg.get("grid", np.linspace(0, 1, 50)), dtype=float)
    lo, hi = analytic_bounds(grid, roy)
    write_table(out / "truth.csv", ["z", "theta", "theta_L", "theta_U"],
                zip(grid, true_theta(grid, roy), lo, hi))
    _manifest(out, cfg, {"roy": asdict(roy), "schema": schema})
    return 0


def _failures(results) -> list:
    return [{"rep": r.rep, "error": r.error} for r in results if not r.ok]


def cmd_coverage(cfg: dict) -> int:
    out = _out_dir(cfg)
    roy, st = _roy(cfg), _study(cfg)
    tasks = ("pointwise", "band") if st.bootstrap_reps else ("pointwise",)
    results = run_replications(roy, st, _reps(cfg, 500), tasks, _threads(cfg))
    table = summarize_coverage(results, st)
    write_table(out / "coverage.csv", ["z", "coverage", "mc_se"], table.rows())
    extra = {"roy": asdict(roy), "reps_used": table.reps_used, "failures": _failures(results)}
    if st.bootstrap_reps:
        bands = summarize_bands(results)
        write_table(out / "band_coverage.csv", ["uniform_coverage", "mc_se", "reps_used"],
                    [(bands["uniform_coverage"], bands["mc_se"], bands["reps_used"])])
    _manifest(out, cfg, extra)
    return 0


def cmd_power(cfg: dict) -> int:
    out = _out_dir(cfg)
    roy, st = _roy(cfg), _study(cfg)
    results = run_replications(roy, st, _reps(cfg, 500), ("pointwise", "power"), _threads(cfg))
    table = summarize_power(results, st, roy)
    write_table(out / "power.csv", ["stratum", "deviation", "null_value", "rejection", "mc_se"],
                table.rows())
    _manifest(out, cfg, {"roy": asdict(roy), "reps_used": table.reps_used,
                         "failures": _failures(results)})
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "coverage": cmd_coverage,
            "power": cmd_power}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg)
    except Exception as exc:  # noqa: BLE001  every failure becomes a structured exit
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(json.dumps({"error": type(exc).__name__, "module": module, "message": str(exc)}),
              file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
