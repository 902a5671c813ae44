"""Simulation scenario generators with their ground-truth covariance components.

Scenario 1 follows the PFA model, Scenario 2 MOM-SS, Scenario 3 SUFA, and
Scenarios 4 and 5 the Tetris model (nutrition-like and gene-expression-like).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..data import MultiStudyDataset
from ..errors import ConfigError

SC4_N = (1362, 217, 417, 1012, 2241, 205, 2403, 3775, 1790, 761, 373, 465)
SC5_N = (157, 195, 285, 117)


@dataclass(frozen=True)
class ScenarioSpec:
    """Generator settings. Use ``ScenarioSpec.default(id)`` for the full-size dimensions."""

    id: int
    S: int
    N_s: tuple
    P: int
    K: int
    J_s: tuple = ()
    n_partial: int = 0
    sparsity: float = 0.4
    loading_range: tuple = (0.6, 1.0)
    alpha_q: float = 0.01
    Q: int = 0
    a_sd: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.id not in (1, 2, 3, 4, 5):
            raise ConfigError(f"unknown scenario id {self.id}")
        object.__setattr__(self, "N_s", tuple(int(n) for n in self.N_s))
        J = tuple(int(j) for j in self.J_s) if self.J_s else (0,) * self.S
        object.__setattr__(self, "J_s", J)
        if len(self.N_s) != self.S or len(self.J_s) != self.S:
            raise ConfigError("N_s and J_s need one entry per study")
        if min(self.N_s) < 2 or self.P < 1 or self.K < 1 or self.S < 1:
            raise ConfigError("scenario dimensions must be positive (N_s >= 2)")
        if not 0 <= self.sparsity < 1:
            raise ConfigError("sparsity must lie in [0, 1)")
        if self.n_partial > 0 and self.S < 3:
            raise ConfigError("partially shared factors need at least 3 studies")

    @classmethod
    def default(cls, id: int, seed: int = 0, **overrides) -> "ScenarioSpec":
        if id not in (1, 2, 3, 4, 5):
            raise ConfigError(f"unknown scenario id {id}")
        base = {
            1: dict(S=4, N_s=(100,) * 4, P=40, K=4, alpha_q=0.01),
            2: dict(S=4, N_s=(100,) * 4, P=40, K=4, Q=2),
            3: dict(S=4, N_s=(100,) * 4, P=40, K=4, J_s=(1,) * 4, a_sd=0.4),
            4: dict(S=12, N_s=SC4_N, P=42, K=4, J_s=(1,) * 12, n_partial=7, Q=12),
            5: dict(S=4, N_s=SC5_N, P=1060, K=15, J_s=(2,) * 4, n_partial=3, sparsity=0.8),
        }[id]
        base.update(overrides)
        return cls(id=id, seed=seed, **base)

    @classmethod
    def tetris_tiny(cls, seed: int = 0, n: int = 200) -> "ScenarioSpec":
        """Two studies, P = 6, one dense common factor and one factor specific to the first study."""
        return cls(id=4, S=2, N_s=(n, n), P=6, K=1, J_s=(1, 0), sparsity=0.0, seed=seed)

    def mini(self) -> "ScenarioSpec":
        """Desk-scale variant: Scenario 4 with N_s / 10, Scenario 5 with P = 200."""
        if self.id == 4:
            return replace(self, N_s=tuple(max(n // 10, 2) for n in self.N_s))
        if self.id == 5:
            return replace(self, P=200)
        return self


@dataclass(frozen=True)
class GroundTruth:
    phi: np.ndarray
    lambda_s: tuple | None
    sigma_phi: np.ndarray
    sigma_lambda_s: tuple | None
    sigma_s: tuple
    psi: tuple
    extras: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    @property
    def J_s(self) -> tuple:
        return tuple(0 if l is None else l.shape[1] for l in (self.lambda_s or [None] * len(self.sigma_s)))


def sparse_loadings(P, K, sparsity, rng, loading_range=(0.6, 1.0)):
    """U(lo, hi) magnitudes with random signs; exactly round(sparsity P K) entries zeroed."""
    lo, hi = loading_range
    L = rng.uniform(lo, hi, size=(P, K)) * rng.choice([-1.0, 1.0], size=(P, K))
    n_zero = int(round(sparsity * P * K))
    idx = rng.choice(P * K, size=n_zero, replace=False)
    L.flat[idx] = 0.0
    return L


def sharing_pattern(S, K, J_s, n_partial, rng):
    """Binary S x K* matrix: K common columns, J_s specific columns per study, then partial columns."""
    cols = [np.ones(S, dtype=int) for _ in range(K)]
    for s, j in enumerate(J_s):
        for _ in range(j):
            c = np.zeros(S, dtype=int)
            c[s] = 1
            cols.append(c)
    for _ in range(n_partial):
        m = rng.integers(2, S)  # 2 .. S-1 studies
        c = np.zeros(S, dtype=int)
        c[rng.choice(S, size=m, replace=False)] = 1
        cols.append(c)
    return np.array(cols, dtype=int).T


def _study_level_covariates(N_s, Q, rng):
    """Covariates constant within a study; per-study centering removes their effect."""
    return [np.tile(rng.standard_normal(Q), (n, 1)) for n in N_s]


def generate_scenario(spec: ScenarioSpec):
    """Draw one replicate. Returns (MultiStudyDataset, GroundTruth); data are uncentered."""
    rng = np.random.default_rng([spec.seed, spec.id])
    P, K, S = spec.P, spec.K, spec.S
    gen = {1: _sc1, 2: _sc2, 3: _sc3, 4: _tetris_like, 5: _tetris_like}[spec.id]
    studies, cov, truth = gen(spec, rng)
    ds = MultiStudyDataset(
        tuple(studies),
        tuple(f"V{p + 1}" for p in range(P)),
        tuple(f"study{s + 1}" for s in range(S)),
        covariates=cov,
    )
    assert truth.phi.shape == (P, K)
    return ds, truth


def _sc1(spec, rng):
    P, K = spec.P, spec.K
    phi = sparse_loadings(P, K, spec.sparsity, rng, spec.loading_range)
    psi = rng.uniform(0, 1, size=P)
    sigma_phi = phi @ phi.T + np.diag(psi)
    studies, qs, sig_s = [], [], []
    for s, n in enumerate(spec.N_s):
        f = rng.standard_normal((n, K))
        e = rng.standard_normal((n, P)) * np.sqrt(psi)
        y = f @ phi.T + e
        Q = np.eye(P) if s == 0 else np.eye(P) + spec.alpha_q * rng.standard_normal((P, P))
        studies.append(y @ Q.T)
        qs.append(Q)
        m = Q @ sigma_phi @ Q.T
        sig_s.append((m + m.T) / 2)
    truth = GroundTruth(
        phi=phi,
        lambda_s=None,
        sigma_phi=sigma_phi,
        sigma_lambda_s=tuple(m - sigma_phi for m in sig_s),
        sigma_s=tuple(sig_s),
        psi=(psi,) * spec.S,
        extras={"Q_s": tuple(qs)},
    )
    return studies, None, truth


def _sc2(spec, rng):
    P, K, Q = spec.P, spec.K, spec.Q
    phi = sparse_loadings(P, K, spec.sparsity, rng, spec.loading_range)
    beta = rng.standard_normal((P, Q))
    X = _study_level_covariates(spec.N_s, Q, rng) if Q else None
    studies, alphas, psis = [], [], []
    for s, n in enumerate(spec.N_s):
        alpha = rng.standard_normal(P)
        psi = rng.uniform(0, 1, size=P)
        f = rng.standard_normal((n, K))
        y = alpha + f @ phi.T + rng.standard_normal((n, P)) * np.sqrt(psi)
        if Q:
            y = y + X[s] @ beta.T
        studies.append(y)
        alphas.append(alpha)
        psis.append(psi)
    sigma_phi = phi @ phi.T
    truth = GroundTruth(
        phi=phi,
        lambda_s=None,
        sigma_phi=sigma_phi,
        sigma_lambda_s=None,
        sigma_s=tuple(sigma_phi + np.diag(p) for p in psis),
        psi=tuple(psis),
        extras={"alpha": np.array(alphas).T, "beta": beta},
    )
    return studies, X, truth


def _sc3(spec, rng):
    P, K = spec.P, spec.K
    phi = sparse_loadings(P, K, spec.sparsity, rng, spec.loading_range)
    psi = rng.uniform(0, 1, size=P)
    sigma_phi = phi @ phi.T + np.diag(psi)
    studies, A, lams = [], [], []
    for s, n in enumerate(spec.N_s):
        a = spec.a_sd * rng.standard_normal((K, spec.J_s[s]))
        lam = phi @ a
        y = rng.standard_normal((n, K)) @ phi.T + rng.standard_normal((n, lam.shape[1])) @ lam.T
        y = y + rng.standard_normal((n, P)) * np.sqrt(psi)
        studies.append(y)
        A.append(a)
        lams.append(lam)
    sig_lam = tuple(l @ l.T for l in lams)
    truth = GroundTruth(
        phi=phi,
        lambda_s=tuple(lams),
        sigma_phi=sigma_phi,
        sigma_lambda_s=sig_lam,
        sigma_s=tuple(sigma_phi + m for m in sig_lam),
        psi=(psi,) * spec.S,
        extras={"A_s": tuple(A)},
    )
    return studies, None, truth


def _tetris_like(spec, rng):
    P, K, S, Q = spec.P, spec.K, spec.S, spec.Q
    T = sharing_pattern(S, K, spec.J_s, spec.n_partial, rng)
    phi_star = sparse_loadings(P, T.shape[1], spec.sparsity, rng, spec.loading_range)
    common = T.sum(axis=0) == S
    phi = phi_star[:, common]
    beta = rng.standard_normal((P, Q)) if Q else None
    X = _study_level_covariates(spec.N_s, Q, rng) if Q else None
    studies, lams, psis, sig_s = [], [], [], []
    for s, n in enumerate(spec.N_s):
        active = T[s] == 1
        load = phi_star[:, active]
        psi = rng.uniform(0, 1, size=P)
        y = rng.standard_normal((n, load.shape[1])) @ load.T + rng.standard_normal((n, P)) * np.sqrt(psi)
        if Q:
            y = y + X[s] @ beta.T
        studies.append(y)
        lams.append(phi_star[:, active & ~common])
        psis.append(psi)
        sig_s.append(load @ load.T + np.diag(psi))
    sigma_phi = phi @ phi.T
    truth = GroundTruth(
        phi=phi,
        lambda_s=tuple(lams),
        sigma_phi=sigma_phi,
        sigma_lambda_s=tuple(l @ l.T for l in lams),
        sigma_s=tuple(sig_s),
        psi=tuple(psis),
        extras={"T": T, "phi_star": phi_star, "beta": beta},
    )
    return studies, X, truth
