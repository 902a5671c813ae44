"""Command-line front end: ``bifa fit``, ``bifa bench`` and ``bifa simulate``.

Settings come from an optional TOML file and are overridden by flags. Exit
codes: 0 success, 2 configuration error, 3 numeric failure, 4 guard refusal
or exhausted time budget. Errors are also written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .bench.grid import BenchConfig, run_grid
from .bench.report import covariance_edge_list, metric_table, write_edge_list
from .bench.scenarios import ScenarioSpec, generate_scenario
from .data import PreprocessSpec, load_dataset, save_dataset, write_matrix_csv
from .errors import BifaError, ConfigError, ParseError
from .methods import METHODS, MethodConfig, prepare_data, run_method

METHOD_FIELDS = {f.name for f in dataclasses.fields(MethodConfig)}


# ------------------------------------------------------------------ config


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def method_config(doc: dict, method: str, flags: dict) -> MethodConfig:
    """Merge [mcmc], [method] and the method-scoped section, then flag overrides."""
    merged = {}
    for section in ("mcmc", "method", method):
        part = doc.get(section, {})
        if section == "method" and isinstance(part, str):
            continue  # top-level method name, not the shared table
        if not isinstance(part, dict):
            raise ConfigError(f"[{section}] must be a table")
        merged.update(part)
    if "seed" in doc:
        merged.setdefault("seed", doc["seed"])
    merged.update({k: v for k, v in flags.items() if v is not None})
    unknown = sorted(set(merged) - METHOD_FIELDS)
    if unknown:
        raise ConfigError(f"unknown method settings: {', '.join(unknown)}")
    try:
        cfg = MethodConfig(**merged)
        cfg.ctrl  # validates the MCMC counts
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def preprocess_spec(doc: dict, args) -> PreprocessSpec:
    part = dict(doc.get("preprocess", {}))
    if args.center is not None:
        part["center"] = args.center
    if args.scale is not None:
        part["scale"] = args.scale
    if args.log_offset is not None:
        part["log_offset"] = args.log_offset
    try:
        return PreprocessSpec(**part)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [preprocess] settings: {exc}") from exc


def _versions() -> dict:
    return {"bifa": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _scalar_extras(extras: dict) -> dict:
    out = {}
    for k, v in extras.items():
        if isinstance(v, (bool, int, float, str)) or v is None:
            out[k] = v
        elif isinstance(v, (np.integer, np.floating)):
            out[k] = v.item()
        elif isinstance(v, (list, tuple)) and all(isinstance(x, (int, float, np.integer, list, tuple)) for x in v):
            out[k] = json.loads(json.dumps(v, default=lambda x: x.item() if hasattr(x, "item") else x))
    return out


# ------------------------------------------------------------------ commands


def cmd_fit(args, doc) -> int:
    method = args.method or (doc.get("method") if isinstance(doc.get("method"), str) else None)
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {', '.join(METHODS)}")
    data = args.data or doc.get("data")
    if not data:
        raise ConfigError("no study files given (--data or data = [...])")
    missing = [p for p in data if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing data files: {', '.join(missing)}")
    covs = args.covariates or doc.get("covariates")
    out = Path(args.out_dir or doc.get("out_dir", "bifa_out"))
    flags = {"K": args.K, "J": args.J if args.J is None or len(args.J) > 1 else args.J[0], "nrun": args.nrun,
             "burn": args.burn, "thin": args.thin, "seed": args.seed, "allow_large_p": args.allow_large_p or None,
             "time_budget": args.time_budget, "checkpoint": args.checkpoint, "resume": args.resume or None,
             "two_pass": False if args.no_refit else None}
    cfg = method_config(doc, method, flags)
    ds = load_dataset(data, covs)
    ref = args.reference_study or doc.get("reference_study")
    if ref:
        ds = ds.reordered(ref)
    ds = prepare_data(method, ds, preprocess_spec(doc, args))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        run = run_method(method, ds, cfg)
    res = run.result
    out.mkdir(parents=True, exist_ok=True)
    names = list(ds.variable_names)
    if res.phi is not None:
        write_matrix_csv(out / "phi.csv", res.phi, [f"F{k + 1}" for k in range(res.phi.shape[1])])
        write_matrix_csv(out / "sigma_phi.csv", res.sigma_phi, names)
    for s, sname in enumerate(ds.study_names):
        if res.lambda_s is not None:
            lam = res.lambda_s[s]
            write_matrix_csv(out / f"lambda_{sname}.csv", lam, [f"L{k + 1}" for k in range(lam.shape[1])])
            write_matrix_csv(out / f"sigma_lambda_{sname}.csv", res.sigma_lambda_s[s], names)
        write_matrix_csv(out / f"sigma_{sname}.csv", res.sigma_marginal_s[s], names)
    write_matrix_csv(out / "psi.csv", np.array(res.psi).T, list(ds.study_names))
    edge_thr = args.edge_threshold if args.edge_threshold is not None else doc.get("edge_threshold")
    if edge_thr is not None and res.sigma_phi is not None:
        write_edge_list(covariance_edge_list(res.sigma_phi, names, float(edge_thr)), out / "edges_sigma_phi.csv")
    meta = {
        "method": method,
        "k_hat": res.k_hat if res.phi is not None else None,
        "j_hat": list(res.j_hat) if res.j_hat is not None else None,
        "variables": names,
        "studies": list(ds.study_names),
        "config": dataclasses.asdict(cfg),
        "preprocess": dataclasses.asdict(preprocess_spec(doc, args)),
        "data": [str(p) for p in data],
        "run": run.meta,
        "provenance": res.provenance,
        "extras": _scalar_extras(res.extras),
        "warnings": [str(w.message) for w in caught] + list(ds.warnings),
        "versions": _versions(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, default=str))
    print(json.dumps({"status": "ok", "out_dir": str(out), "k_hat": meta["k_hat"], "j_hat": meta["j_hat"]}))
    return 0


def cmd_bench(args, doc) -> int:
    part = dict(doc.get("bench", {}))
    if args.scenarios:
        part["scenarios"] = args.scenarios
    if args.methods:
        part["methods"] = args.methods
    if args.reps is not None:
        part["reps"] = args.reps
    if args.full:
        part["mini"] = False
    if args.mse:
        part["mse"] = True
    if args.seed is not None:
        part["seed"] = args.seed
    part["out_dir"] = args.out_dir or part.get("out_dir") or doc.get("out_dir", "bifa_bench")
    methods = tuple(part.get("methods", ("stackfa",)))
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods: {', '.join(bad)}")
    flags = {"K": args.K, "nrun": args.nrun, "burn": args.burn}
    base = method_config({k: v for k, v in doc.items() if k not in METHODS}, "", flags)
    overrides = {m: doc[m] for m in methods if isinstance(doc.get(m), dict)}
    for m, o in overrides.items():
        unknown = sorted(set(o) - METHOD_FIELDS)
        if unknown:
            raise ConfigError(f"unknown settings in [{m}]: {', '.join(unknown)}")
    allowed = {f.name for f in dataclasses.fields(BenchConfig)} - {"method", "method_overrides"}
    unknown = sorted(set(part) - allowed)
    if unknown:
        raise ConfigError(f"unknown [bench] settings: {', '.join(unknown)}")
    part["scenarios"] = tuple(int(s) for s in part.get("scenarios", (1,)))
    part["methods"] = methods
    bench = BenchConfig(method=base, method_overrides=overrides, **part)
    records = run_grid(bench)
    table = metric_table(records, methods)
    meta = {"bench": {k: v for k, v in dataclasses.asdict(bench).items()}, "versions": _versions()}
    Path(bench.out_dir, "meta.json").write_text(json.dumps(meta, indent=1, default=str))
    print(json.dumps({"status": "ok", "out_dir": bench.out_dir, "cells": len(records),
                      "failed": sum(r.status == "failed" for r in records),
                      "refused": sum(r.status == "refused" for r in records), "table": table}))
    return 0


def cmd_simulate(args, doc) -> int:
    part = dict(doc.get("simulate", {}))
    scenario = args.scenario if args.scenario is not None else part.get("scenario")
    if scenario is None:
        raise ConfigError("--scenario is required")
    seed = args.seed if args.seed is not None else part.get("seed", 0)
    mini = args.mini or part.get("mini", False)
    spec = ScenarioSpec.default(int(scenario), seed=int(seed))
    if mini:
        spec = spec.mini()
    ds, truth = generate_scenario(spec)
    out = Path(args.out_dir or part.get("out_dir") or doc.get("out_dir", f"scenario{scenario}_seed{seed}"))
    files = save_dataset(ds, out)
    names = list(ds.variable_names)
    write_matrix_csv(out / "truth_phi.csv", truth.phi, [f"F{k + 1}" for k in range(truth.K)])
    write_matrix_csv(out / "truth_sigma_phi.csv", truth.sigma_phi, names)
    for s in range(ds.S):
        write_matrix_csv(out / f"truth_sigma_s{s + 1}.csv", truth.sigma_s[s], names)
        if truth.sigma_lambda_s is not None:
            write_matrix_csv(out / f"truth_sigma_lambda_s{s + 1}.csv", truth.sigma_lambda_s[s], names)
    write_matrix_csv(out / "truth_psi.csv", np.array(truth.psi).T, list(ds.study_names))
    if "T" in truth.extras:
        write_matrix_csv(out / "truth_sharing.csv", truth.extras["T"], [f"C{k + 1}" for k in range(truth.extras["T"].shape[1])])
    spec_doc = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(spec).items()}
    (out / "spec.json").write_text(json.dumps({"spec": spec_doc, "versions": _versions()}, indent=1, sort_keys=True))
    print(json.dumps({"status": "ok", "out_dir": str(out), "studies": [str(f) for f in files]}))
    return 0


# ------------------------------------------------------------------ parser


def _bool_flag(p, name, help_):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help_)
    g.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bifa", description="Bayesian integrative factor models for multi-study data")
    p.add_argument("--version", action="version", version=f"bifa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit one method to study CSV files")
    f.add_argument("--config")
    f.add_argument("--method", choices=METHODS)
    f.add_argument("--data", nargs="+", help="one CSV per study, header row of variable names")
    f.add_argument("--covariates", nargs="+", help="one covariate CSV per study (MOM-SS)")
    f.add_argument("--out-dir")
    f.add_argument("--K", type=int)
    f.add_argument("--J", type=int, nargs="+")
    f.add_argument("--nrun", type=int)
    f.add_argument("--burn", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--allow-large-p", action="store_true", help="let PFA run above its P cap")
    f.add_argument("--reference-study", help="study name moved to the front (the PFA reference, Q = I)")
    f.add_argument("--no-refit", action="store_true", help="skip the EVD refit for stackfa/indfa/bmsfa")
    f.add_argument("--time-budget", type=float, help="Tetris phase-1 wall-clock seconds")
    f.add_argument("--checkpoint", help="Tetris checkpoint path")
    f.add_argument("--resume", action="store_true")
    f.add_argument("--edge-threshold", type=float, help="write |correlation| >= threshold edges of Sigma_Phi")
    _bool_flag(f, "center", "per-study centering (default on)")
    _bool_flag(f, "scale", "per-study unit variance")
    f.add_argument("--log-offset", type=float)

    b = sub.add_parser("bench", help="run a scenario x method grid")
    b.add_argument("--config")
    b.add_argument("--scenarios", type=int, nargs="+")
    b.add_argument("--methods", nargs="+")
    b.add_argument("--reps", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--full", action="store_true", help="full-size dimensions instead of the desk-scale variants")
    b.add_argument("--mse", action="store_true", help="70/30 split and held-out prediction MSE")
    b.add_argument("--K", type=int)
    b.add_argument("--nrun", type=int)
    b.add_argument("--burn", type=int)
    b.add_argument("--out-dir")

    s = sub.add_parser("simulate", help="write one scenario replicate and its truth")
    s.add_argument("--config")
    s.add_argument("--scenario", type=int, choices=(1, 2, 3, 4, 5))
    s.add_argument("--seed", type=int)
    s.add_argument("--mini", action="store_true")
    s.add_argument("--out-dir")
    return p


def _error_exit(exc: BaseException, code: int) -> int:
    doc = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    diag = getattr(exc, "diagnostics", None)
    if diag:
        doc["diagnostics"] = diag
    ckpt = getattr(exc, "checkpoint", None)
    if ckpt:
        doc["checkpoint"] = ckpt
    print(json.dumps(doc, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        doc = load_config(args.config)
        handler = {"fit": cmd_fit, "bench": cmd_bench, "simulate": cmd_simulate}[args.command]
        return handler(args, doc)
    except BifaError as exc:
        return _error_exit(exc, exc.exit_code)
    except np.linalg.LinAlgError as exc:
        return _error_exit(exc, 3)
    except (ValueError, TypeError) as exc:
        return _error_exit(exc, 2)
    except ArithmeticError as exc:
        return _error_exit(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
