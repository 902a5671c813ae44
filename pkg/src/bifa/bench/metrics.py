"""Evaluation metrics: RV coefficient, Frobenius distance, Bartlett prediction MSE."""

from __future__ import annotations

import warnings

import numpy as np

from ..data import MultiStudyDataset
from ..errors import DimensionError, DomainError
from ..postprocess import FitResult


def rv_coefficient(X, Y) -> float:
    """tr(XX'YY') / sqrt(tr((XX')^2) tr((YY')^2)), computed without column centering."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] != Y.shape[0]:
        raise DimensionError("RV needs matrices with the same number of rows")
    # traces via the small cross-product matrices: tr(XX'YY') = ||X'Y||_F^2
    num = np.sum((X.T @ Y) ** 2)
    dx = np.sum((X.T @ X) ** 2)
    dy = np.sum((Y.T @ Y) ** 2)
    if dx == 0 or dy == 0:
        raise DomainError("RV coefficient is undefined for a zero matrix")
    return float(min(num / np.sqrt(dx * dy), 1.0))


def frobenius_distance(X, Y) -> float:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape != Y.shape:
        raise DimensionError(f"shape mismatch {X.shape} vs {Y.shape}")
    return float(np.linalg.norm(X - Y))


def train_test_split(ds: MultiStudyDataset, train_frac: float = 0.7, seed: int = 0):
    """Per-study uniform split without replacement. Returns (train, test)."""
    rng = np.random.default_rng([seed, 7])
    tr, te = [], []
    for n in ds.N:
        perm = rng.permutation(n)
        k = int(round(train_frac * n))
        k = min(max(k, 2), n - 2) if n >= 4 else max(n - 1, 1)
        tr.append(np.sort(perm[:k]))
        te.append(np.sort(perm[k:]))
    return ds.subset_rows(tr), ds.subset_rows(te)


def bartlett_scores(Y, B, psi):
    """Generalised least-squares scores (B' Psi^-1 B)^-1 B' Psi^-1 y for each row of Y."""
    K = B.shape[1]
    Bw = B / psi[:, None]
    G = B.T @ Bw
    try:
        c = np.linalg.cond(G)
    except np.linalg.LinAlgError:
        c = np.inf
    if not np.isfinite(c) or c > 1e12:
        warnings.warn("singular Bartlett Gram matrix; adding a ridge", RuntimeWarning, stacklevel=2)
        ridge = 1e-8 * np.trace(G) / max(K, 1)
        G = G + (ridge if ridge > 0 else 1e-8) * np.eye(K)
    return np.linalg.solve(G, (Y @ Bw).T).T


def prediction_mse(fit: FitResult, test: MultiStudyDataset, include_specific: bool = True) -> float:
    """Held-out reconstruction MSE from Bartlett scores, averaged over all P * sum(N_s) cells.

    Loadings used per study are [Phi, Lambda_s] when the fit has study-specific
    loadings (and ``include_specific``), otherwise Phi alone. Ind FA uses Lambda_s.
    """
    total, count = 0.0, 0
    for s, y in enumerate(test.studies):
        blocks = []
        if fit.phi is not None and fit.phi.shape[1] > 0:
            blocks.append(fit.phi)
        if fit.lambda_s is not None and (include_specific or fit.phi is None) and fit.lambda_s[s].shape[1] > 0:
            blocks.append(fit.lambda_s[s])
        if not blocks:
            yhat = np.zeros_like(y)
        else:
            B = np.hstack(blocks)
            f = bartlett_scores(y, B, np.asarray(fit.psi[s]))
            yhat = f @ B.T
        total += float(np.sum((yhat - y) ** 2))
        count += y.size
    return total / count


def mean_sd(values, digits: int = 2) -> str:
    """'mean(sd)' with the sample (ddof=1) SD; a single value has SD 0."""
    v = np.asarray(values, dtype=float)
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    return f"{v.mean():.{digits}f}({sd:.{digits}f})"


def factor_count_report(rows):
    """Table-2 style summary.

    Args:
        rows: iterable of dicts with keys ``method``, ``k_hat`` (int or None) and
            ``j_hat`` (sequence or None), one per replicate.

    Returns:
        list of dicts ``{"method", "K", "J_s"}`` with mean(SD) strings, methods in first-seen order.
    """
    by = {}
    for r in rows:
        by.setdefault(r["method"], []).append(r)
    out = []
    for m, rs in by.items():
        ks = [r["k_hat"] for r in rs if r.get("k_hat") is not None]
        js = [r["j_hat"] for r in rs if r.get("j_hat") is not None]
        k_txt = mean_sd(ks) if ks else "-"
        j_txt = "[" + ", ".join(mean_sd(col) for col in zip(*js)) + "]" if js else "-"
        out.append({"method": m, "K": k_txt, "J_s": j_txt})
    return out
