"""Evaluation records and their on-disk forms (JSON records, CSV tables, edge lists)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DomainError
from ..postprocess import FitResult
from .metrics import frobenius_distance, mean_sd, rv_coefficient
from .scenarios import GroundTruth


@dataclass
class EvaluationRecord:
    """One method x scenario x seed cell."""

    method: str
    scenario: int
    seed: int
    status: str = "ok"  # ok | refused | failed
    message: str = ""
    rv: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    mse: float | None = None
    k_hat: int | None = None
    j_hat: list | None = None
    seconds: float | None = None
    peak_mib: float | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return None if not math.isfinite(v) else v
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _safe_rv(a, b):
    try:
        return rv_coefficient(a, b)
    except DomainError:
        return float("nan")


def compare_to_truth(res: FitResult, truth: GroundTruth) -> tuple[dict, dict]:
    """RV and Frobenius distance of Sigma_Phi, mean over studies of Sigma_s and Sigma_Lambda_s.

    Returns (rv, fn) dictionaries keyed by quantity; missing quantities are omitted.
    A zero estimate or truth gives RV = NaN (reported as NA).
    """
    rv, fn = {}, {}
    if res.sigma_phi is not None and truth.sigma_phi is not None:
        rv["sigma_phi"] = _safe_rv(res.sigma_phi, truth.sigma_phi)
        fn["sigma_phi"] = frobenius_distance(res.sigma_phi, truth.sigma_phi)
    S = len(truth.sigma_s)
    rv["sigma_s"] = float(np.mean([_safe_rv(res.sigma_marginal_s[s], truth.sigma_s[s]) for s in range(S)]))
    fn["sigma_s"] = float(np.mean([frobenius_distance(res.sigma_marginal_s[s], truth.sigma_s[s]) for s in range(S)]))
    if res.sigma_lambda_s is not None and truth.sigma_lambda_s is not None:
        rv["sigma_lambda"] = float(np.nanmean([_safe_rv(res.sigma_lambda_s[s], truth.sigma_lambda_s[s]) for s in range(S)]))
        fn["sigma_lambda"] = float(np.mean([frobenius_distance(res.sigma_lambda_s[s], truth.sigma_lambda_s[s]) for s in range(S)]))
    return rv, fn


def write_records(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_json() for r in records], indent=1))
    return path


def write_table(rows, path, columns=None):
    """Write a list of dicts as CSV; columns default to the first row's keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})
    return path


def metric_table(records, method_order=None):
    """Mean(SD) of each RV / FN / MSE / runtime column per method; NaN entries are skipped."""
    order = list(method_order or dict.fromkeys(r.method for r in records))
    rows = []
    for m in order:
        rs = [r for r in records if r.method == m and r.status == "ok"]
        row = {"method": m, "n_ok": len(rs), "n_failed": sum(r.method == m and r.status != "ok" for r in records)}
        keys = sorted({k for r in rs for k in r.rv})
        for k in keys:
            for name, src in (("rv", "rv"), ("fn", "fn")):
                vals = [getattr(r, src).get(k) for r in rs]
                vals = [v for v in vals if v is not None and math.isfinite(v)]
                row[f"{name}_{k}"] = mean_sd(vals) if vals else "NA"
        mses = [r.mse for r in rs if r.mse is not None]
        if mses:
            row["mse"] = mean_sd(mses, 3)
        secs = [r.seconds for r in rs if r.seconds is not None]
        if secs:
            row["seconds"] = mean_sd(secs)
        mem = [r.peak_mib for r in rs if r.peak_mib is not None]
        if mem:
            row["peak_mib"] = mean_sd(mem, 1)
        rows.append(row)
    return rows


def covariance_edge_list(sigma, names, threshold: float, correlation: bool = True):
    """Off-diagonal pairs with |weight| >= threshold as (source, target, weight) rows.

    With ``correlation`` the matrix is rescaled to unit diagonal first, which
    keeps one threshold meaningful across variables on different scales.
    """
    sigma = np.asarray(sigma, dtype=float)
    if correlation:
        d = np.sqrt(np.clip(np.diag(sigma), 1e-300, None))
        sigma = sigma / np.outer(d, d)
    iu = np.triu_indices(sigma.shape[0], k=1)
    keep = np.abs(sigma[iu]) >= threshold
    return [(names[i], names[j], float(sigma[i, j])) for i, j in zip(iu[0][keep], iu[1][keep])]


def write_edge_list(edges, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "weight"])
        for e in edges:
            w.writerow([e[0], e[1], repr(e[2])])
    return path
