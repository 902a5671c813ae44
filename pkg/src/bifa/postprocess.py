"""Identifiability post-processing and point-estimate assembly.

Orthogonal Procrustes alignment of draw stacks, varimax, spectral loadings,
EVD factor counting and the cross-method ``FitResult`` container.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, DomainError


class DegenerateInputWarning(UserWarning):
    """Input is valid but the answer is degenerate (e.g. zero factors selected)."""


def _sym(a):
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class FitResult:
    """Point estimates shared by every method, used for cross-method comparison.

    ``psi`` always holds one residual-variance vector per study; methods with a
    shared residual repeat the same vector. ``phi`` is ``None`` for Ind FA.
    """

    method: str
    phi: np.ndarray | None
    lambda_s: tuple | None
    psi: tuple
    sigma_phi: np.ndarray | None
    sigma_lambda_s: tuple | None
    sigma_marginal_s: tuple
    k_hat: int
    j_hat: tuple | None = None
    provenance: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi is not None and self.phi.shape[1] != self.k_hat:
            raise DimensionError(f"k_hat={self.k_hat} but phi has {self.phi.shape[1]} columns")
        mats = list(self.sigma_marginal_s)
        if self.sigma_phi is not None:
            mats.append(self.sigma_phi)
        if self.sigma_lambda_s is not None:
            mats.extend(self.sigma_lambda_s)
        for m in mats:
            if not np.allclose(m, m.T, atol=1e-10 * max(1.0, float(np.abs(m).max(initial=0.0)))):
                raise DomainError("covariance estimate is not symmetric")
        for m in self.sigma_marginal_s:
            if np.linalg.eigvalsh(m)[0] < -1e-8 * max(1.0, float(np.abs(m).max())):
                raise DomainError("marginal covariance estimate is not PSD")

    @property
    def S(self) -> int:
        return len(self.sigma_marginal_s)

    @property
    def P(self) -> int:
        return self.sigma_marginal_s[0].shape[0]


# ------------------------------------------------------------ alignment


def procrustes_rotation(x, ref):
    """Orthogonal R minimising ||x R - ref||_F."""
    u, _, vt = np.linalg.svd(x.T @ ref)
    return u @ vt


def op_align(draws, tol: float = 1e-8, max_sweeps: int = 10):
    """Iterative orthogonal Procrustes alignment of a stack of P x K draws.

    The reference starts at the stack mean (or at the first draw when the mean
    has largely cancelled, as for rotation-scrambled stacks) and is replaced by
    the mean of the aligned stack after each sweep until it moves by less than
    ``tol``. An already aligned stack is returned unchanged.

    Returns:
        (aligned, mean): aligned stack of shape (T, P, K) and its mean.
    """
    stack = np.asarray(draws, dtype=float)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise DimensionError("op_align needs a non-empty stack of P x K draws")
    T = stack.shape[0]
    if T == 1 or stack.shape[2] == 0:
        return stack.copy(), stack.mean(axis=0)
    norms = np.sqrt(np.einsum("tpk,tpk->t", stack, stack))
    live = norms > 0
    if not np.any(live):
        warnings.warn("all draws are zero; alignment is the identity", DegenerateInputWarning, stacklevel=2)
        return stack.copy(), stack.mean(axis=0)
    # the stack mean is a fixed point for an aligned stack; use it unless it has cancelled
    ref = stack.mean(axis=0)
    if np.linalg.norm(ref) < 0.5 * norms[live].mean():
        ref = stack[np.flatnonzero(live)[0]].copy()
    aligned = stack.copy()
    for _ in range(max_sweeps):
        for t in np.flatnonzero(live):
            aligned[t] = stack[t] @ procrustes_rotation(stack[t], ref)
        new_ref = aligned.mean(axis=0)
        moved = np.linalg.norm(new_ref - ref)
        ref = new_ref
        if moved < tol * max(1.0, np.linalg.norm(ref)):
            break
    return aligned, ref


def match_to_pivot(x, pivot):
    """Permute and sign-flip the columns of x to best match pivot (Hungarian on |cross-products|)."""
    c = x.T @ pivot
    rows, cols = linear_sum_assignment(-np.abs(c))
    out = np.zeros_like(pivot)
    signs = np.sign(c[rows, cols])
    signs[signs == 0] = 1.0
    out[:, cols] = x[:, rows] * signs
    return out


# -------------------------------------------------------------- varimax


def varimax_criterion(loadings) -> float:
    """Raw varimax criterion: summed column variances of squared loadings."""
    l2 = np.asarray(loadings, dtype=float) ** 2
    return float(np.sum(l2.var(axis=0)))


def varimax(loadings, tol: float = 1e-8, max_iter: int = 1000, return_rotation: bool = False):
    """Raw varimax rotation by SVD iterations until the rotation moves less than ``tol``.

    Column signs are set so that column sums are non-negative.
    """
    L = np.asarray(loadings, dtype=float)
    if L.ndim != 2 or L.shape[1] < 1:
        raise DimensionError("varimax needs a P x K matrix with K >= 1")
    P, K = L.shape
    R = np.eye(K)
    if K > 1:
        crit = varimax_criterion(L)
        for _ in range(max_iter):
            Lr = L @ R
            B = L.T @ (Lr**3 - Lr * (np.sum(Lr**2, axis=0) / P))
            u, _, vt = np.linalg.svd(B)
            R_new = u @ vt
            crit_new = varimax_criterion(L @ R_new)
            # a drop only happens at roundoff level next to the optimum; keeping
            # the previous rotation makes the accepted criteria non-decreasing
            if crit_new < crit:
                break
            step = np.linalg.norm(R_new - R)
            R, crit = R_new, crit_new
            if step < tol:
                break
    signs = np.where((L @ R).sum(axis=0) < 0, -1.0, 1.0)
    R = R * signs
    out = L @ R
    return (out, R) if return_rotation else out


# ---------------------------------------------------- spectral utilities


def _check_symmetric(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionError("expected a square matrix")
    if np.linalg.norm(sigma - sigma.T) > 1e-8:
        raise DomainError("matrix is not symmetric")
    return _sym(sigma)


def evd_num_factors(sigma, threshold: float = 0.05) -> int:
    """Number of eigenvalues whose share of the trace is strictly above ``threshold``."""
    sigma = _check_symmetric(sigma)
    vals = np.linalg.eigvalsh(sigma)[::-1]
    total = vals.sum()
    if total <= 0:
        warnings.warn("non-positive trace; no factors selected", DegenerateInputWarning, stacklevel=2)
        return 0
    k = int(np.sum(vals / total > threshold))
    if k == 0:
        warnings.warn("no eigenvalue exceeds the threshold share", DegenerateInputWarning, stacklevel=2)
    return k


def spectral_loadings(sigma, k: int):
    """U_k N_k^{1/2} from the top-k eigenpairs; each column's largest-|entry| is positive."""
    sigma = _check_symmetric(sigma)
    P = sigma.shape[0]
    if not 0 <= k <= P:
        raise DimensionError(f"k={k} outside [0, {P}]")
    vals, vecs = np.linalg.eigh(sigma)
    vals, vecs = vals[::-1][:k], vecs[:, ::-1][:, :k]
    if np.any(vals < -1e-8):
        raise DomainError("a retained eigenvalue is negative")
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    idx = np.argmax(np.abs(L), axis=0)
    signs = np.sign(L[idx, np.arange(k)])
    signs[signs == 0] = 1.0
    return L * signs


def order_by_variance(loadings):
    """Columns sorted by descending explained-variance share (column sum of squares)."""
    L = np.asarray(loadings, dtype=float)
    if L.shape[1] == 0:
        return L
    return L[:, np.argsort(-np.sum(L**2, axis=0), kind="stable")]


def mean_cov(mats: Sequence[np.ndarray]):
    return _sym(np.mean(np.asarray(mats), axis=0))
