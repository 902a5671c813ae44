"""SUbspace Factor Analysis (SUFA).

Study-specific loadings live in the column space of the shared loadings,
Lambda_s = Phi A_s, so after integrating out the factors

    y_is ~ N(0, Phi (I + A_s A_s') Phi' + Psi),   Psi = diag(psi) shared.

Priors: Dirichlet-Laplace on Phi, A_s entries N(0, sigma_A^2), and log-normal
psi_p with mean 1 and variance 7. (Phi, A_1..A_S, log psi) move jointly by HMC
on this marginal posterior; the DL hyperparameters are refreshed by Gibbs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import MultiStudyDataset
from .errors import ConfigError, DimensionError, NumericError
from .mcmc import McmcControl, data_rng
from .postprocess import FitResult, match_to_pivot, mean_cov, spectral_loadings, varimax
from .priors import DlState, dl_gibbs_update

# log-normal psi with E = 1 and Var = 7: exp(s2) - 1 = 7 gives s2 = log 8, and
# exp(mu + s2 / 2) = 1 gives mu = -s2 / 2
PSI_LOG_VAR = math.log(8.0)
PSI_LOG_MEAN = -0.5 * PSI_LOG_VAR
SIGMA_A2 = 1.0
MAX_REJECT_FRAC = 0.1
# below this P the P x P scatter path is cheaper than the data path for any N_s
SCATTER_MAX_P = 300


@dataclass(frozen=True)
class HmcConfig:
    """Leapfrog steps, initial step size and the dual-averaging target acceptance."""

    steps: int = 20
    stepsize: float = 0.01
    adapt_target: float = 0.8

    def __post_init__(self):
        if self.steps < 1 or self.stepsize <= 0 or not 0 < self.adapt_target < 1:
            raise ConfigError("HMC needs steps >= 1, stepsize > 0 and a target in (0, 1)")


@dataclass(frozen=True)
class SufaFit:
    phi_draws: np.ndarray  # T x P x K
    a_draws: tuple  # per study, T x K x J_s
    psi_draws: np.ndarray  # T x P
    dl_theta_draws: np.ndarray  # T
    j_alloc: tuple
    ctrl: McmcControl
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if sum(self.j_alloc) > self.phi_draws.shape[2]:
            raise ConfigError("identifiability needs sum(J_s) <= K")

    @property
    def S(self) -> int:
        return len(self.j_alloc)

    @property
    def K(self) -> int:
        return self.phi_draws.shape[2]

    def study_covariance(self, t: int, s: int):
        phi = self.phi_draws[t]
        lam = phi @ self.a_draws[s][t]
        return phi @ phi.T + lam @ lam.T + np.diag(self.psi_draws[t])


def default_j_alloc(K: int, S: int, remainder: str = "drop") -> tuple:
    """J_s = floor(K / S) per study; ``remainder="spread"`` hands leftovers to the first studies."""
    base = [K // S] * S
    if remainder == "spread":
        for s in range(K - S * (K // S)):
            base[s] += 1
    elif remainder != "drop":
        raise ConfigError(f"unknown remainder rule {remainder!r}")
    return tuple(base)


def sufa_select_kmax(ds: MultiStudyDataset, qmax: int, variance_target: float = 0.95) -> int:
    """Smallest K whose leading squared singular values reach the target share, capped at qmax."""
    if not 1 <= qmax <= ds.P:
        raise DimensionError(f"qmax={qmax} must lie in [1, P={ds.P}]")
    pooled = np.vstack([y - y.mean(axis=0) for y in ds.studies])
    sv2 = np.linalg.svd(pooled, compute_uv=False) ** 2
    total = sv2.sum()
    if total <= 0:
        return 1
    share = np.cumsum(sv2) / total
    k = int(np.searchsorted(share, variance_target - 1e-12) + 1)
    return int(min(max(k, 1), qmax))


# ----------------------------------------------------- marginal likelihood


def loglik_grad_dense(scatter, n, B, psi):
    """Gaussian log-likelihood of n rows with scatter Y'Y under N(0, BB' + diag psi).

    Returns (loglik, d/dB, d/dpsi). Dense P x P path, used when P <= n.
    """
    P = B.shape[0]
    sigma = B @ B.T + np.diag(psi)
    c = linalg.cho_factor(sigma, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    sinv = linalg.cho_solve(c, np.eye(P))
    sinv_s = sinv @ scatter
    ll = -0.5 * (n * logdet + np.trace(sinv_s) + n * P * math.log(2 * math.pi))
    G = 0.5 * (sinv_s @ sinv - n * sinv)
    return ll, 2.0 * G @ B, np.diag(G).copy()


def loglik_grad_woodbury(Y, B, psi):
    """Same quantities as ``loglik_grad_dense`` through the (K + J) x (K + J) capacitance matrix."""
    n, P = Y.shape
    D = B.shape[1]
    Bw = B / psi[:, None]
    M = np.eye(D) + B.T @ Bw
    c = linalg.cho_factor(M, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0]))) + np.sum(np.log(psi))
    Yw = Y / psi
    W = Yw - linalg.cho_solve(c, (Y @ Bw).T).T @ Bw.T  # rows of Y Sigma^-1
    ll = -0.5 * (n * logdet + np.sum(W * Y) + n * P * math.log(2 * math.pi))
    sinv_b = linalg.cho_solve(c, Bw.T).T  # Sigma^-1 B = Psi^-1 B M^-1
    gB = W.T @ (W @ B) - n * sinv_b
    diag_sinv = 1.0 / psi - np.sum(sinv_b * Bw, axis=1)
    gpsi = 0.5 * (np.sum(W * W, axis=0) - n * diag_sinv)
    return ll, gB, gpsi


def _batched_terms(smul, sdiag, n, B, psi):
    """Log-likelihood and gradients for a batch of studies sharing psi.

    Uses only products S_s X with the scatter matrices (``smul``) and their
    diagonals, so the cost is O(P^2 D) per study with a scatter matrix and
    O(n P D) when ``smul`` goes through the data.

    Args:
        smul: callable mapping a (S, P, D) array X to the stacked S_s X_s.
        sdiag: (S, P) diagonals of the scatter matrices.
        n: (S,) row counts.
        B: (S, P, D) stacked loadings [Phi, Phi A_s].
        psi: (P,) residual variances.

    Returns:
        (loglik per study (S,), d/dB (S, P, D), d/dpsi (S, P)).
    """
    P, D = B.shape[1], B.shape[2]
    Bw = B / psi[:, None]
    M = np.eye(D) + np.swapaxes(B, 1, 2) @ Bw
    L = np.linalg.cholesky(M)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1) + np.sum(np.log(psi))
    Minv = np.linalg.inv(M)
    C = Bw @ Minv  # Sigma^-1 B
    SBw = smul(Bw)
    SC = SBw @ Minv  # S Sigma^-1 B
    tr = np.sum(sdiag / psi, axis=1) - np.sum(C * SBw, axis=(1, 2))
    P2 = P * math.log(2 * math.pi)
    ll = -0.5 * (n * (logdet + P2) + tr)
    BwtSBw = np.swapaxes(Bw, 1, 2) @ SBw
    # Sigma^-1 S Sigma^-1 B
    sss_b = SC / psi[:, None] - C @ (np.swapaxes(Bw, 1, 2) @ SC)
    gB = sss_b - n[:, None, None] * C
    diag_sinv = 1.0 / psi - np.sum(C * Bw, axis=2)
    diag_sss = sdiag / psi**2 - 2.0 * np.sum(SBw * C, axis=2) / psi + np.sum((C @ BwtSBw) * C, axis=2)
    gpsi = 0.5 * (diag_sss - n[:, None] * diag_sinv)
    return ll, gB, gpsi


class _Target:
    """Log posterior of the HMC block and its gradient in a flat parameterisation.

    Studies with P <= max(N_s, SCATTER_MAX_P) go through a batched
    scatter-matrix path; the rest go through their data matrices one at a time. A_s is zero-padded to max J_s,
    which leaves every Sigma_s unchanged.
    """

    def __init__(self, Ys, K, J):
        self.P = Ys[0].shape[1]
        self.K = K
        self.J = tuple(J)
        self.Jmax = max(self.J) if self.J else 0
        n = np.array([len(y) for y in Ys], dtype=float)
        self.n = n
        self.dense = np.array([self.P <= max(len(y), SCATTER_MAX_P) for y in Ys])
        self.dense_idx = np.flatnonzero(self.dense)
        self.data_idx = np.flatnonzero(~self.dense)
        self.scatter = np.array([Ys[s].T @ Ys[s] for s in self.dense_idx]).reshape(-1, self.P, self.P)
        self.sdiag = np.array([np.sum(y * y, axis=0) for y in Ys])
        self.Ys = Ys
        sizes = [self.P * K] + [K * j for j in self.J] + [self.P]
        self.offsets = np.cumsum([0] + sizes)
        self.dim = int(self.offsets[-1])

    def unpack(self, x):
        o = self.offsets
        phi = x[o[0]:o[1]].reshape(self.P, self.K)
        A = [x[o[s + 1]:o[s + 2]].reshape(self.K, j) for s, j in enumerate(self.J)]
        eta = x[o[-2]:o[-1]]
        return phi, A, eta

    def pack(self, phi, A, eta):
        return np.concatenate([phi.ravel()] + [a.ravel() for a in A] + [eta])

    def loglik(self, x):
        """Marginal log-likelihood and its gradient in (Phi, A_s, log psi)."""
        phi, A, eta = self.unpack(x)
        psi = np.exp(eta)
        K, S = self.K, len(A)
        Apad = np.zeros((S, K, self.Jmax))
        for s, a in enumerate(A):
            Apad[s, :, : a.shape[1]] = a
        lam = np.einsum("pk,skj->spj", phi, Apad)
        B = np.concatenate([np.broadcast_to(phi, (S, self.P, K)), lam], axis=2)
        gB = np.empty_like(B)
        gpsi = np.empty((S, self.P))
        ll = np.empty(S)
        d = self.dense_idx
        if d.size:
            ll[d], gB[d], gpsi[d] = _batched_terms(
                lambda X: self.scatter @ X, self.sdiag[d], self.n[d], B[d], psi)
        for s in self.data_idx:
            y = self.Ys[s]
            out = _batched_terms(lambda X, y=y: (y.T @ (y @ X[0]))[None], self.sdiag[s:s + 1],
                                 self.n[s:s + 1], B[s:s + 1], psi)
            ll[s], gB[s], gpsi[s] = out[0][0], out[1][0], out[2][0]
        g_phi = gB[:, :, :K].sum(axis=0) + np.einsum("spj,skj->pk", gB[:, :, K:], Apad)
        gA = np.einsum("pk,spj->skj", phi, gB[:, :, K:])
        g_A = [gA[s, :, : a.shape[1]] for s, a in enumerate(A)]
        return float(ll.sum()), self.pack(g_phi, g_A, gpsi.sum(axis=0) * psi)

    def logpost(self, x, prior_var_phi):
        phi, A, eta = self.unpack(x)
        ll, g = self.loglik(x)
        lp = -0.5 * np.sum(phi**2 / prior_var_phi)
        lp -= 0.5 * sum(np.sum(a**2) for a in A) / SIGMA_A2
        lp -= 0.5 * np.sum((eta - PSI_LOG_MEAN) ** 2) / PSI_LOG_VAR
        gp = self.pack(-phi / prior_var_phi, [-a / SIGMA_A2 for a in A], -(eta - PSI_LOG_MEAN) / PSI_LOG_VAR)
        return ll + lp, g + gp


class _DualAveraging:
    """Step-size adaptation toward a target acceptance rate."""

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.hbar = 0.0
        self.log_eps_bar = math.log(eps0)
        self.t = 0

    def update(self, accept_prob) -> float:
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_prob)
        log_eps = self.mu - math.sqrt(t) / self.gamma * self.hbar
        eta = t ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self) -> float:
        return math.exp(self.log_eps_bar)


def _hmc_step(target, x, lp, grad, prior_var, eps, steps, rng, inv_mass):
    """One leapfrog trajectory with a diagonal mass matrix.

    Returns (x, lp, grad, accept_prob, finite).
    """
    p0 = rng.standard_normal(x.shape) / np.sqrt(inv_mass)
    xn, p = x.copy(), p0 + 0.5 * eps * grad
    finite = True
    with np.errstate(all="ignore"):
        for i in range(steps):
            xn = xn + eps * inv_mass * p
            try:
                lpn, gn = target.logpost(xn, prior_var)
            except (np.linalg.LinAlgError, ValueError):
                finite = False
                break
            if not (np.isfinite(lpn) and np.all(np.isfinite(gn))):
                finite = False
                break
            p = p + (eps if i < steps - 1 else 0.5 * eps) * gn
    if not finite:
        return x, lp, grad, 0.0, False
    log_ratio = (lpn - 0.5 * p @ (inv_mass * p)) - (lp - 0.5 * p0 @ (inv_mass * p0))
    acc = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    if rng.uniform() < acc:
        return xn, lpn, gn, acc, True
    return x, lp, grad, acc, True


def _init_params(Ys, K, J, rng):
    pooled = np.vstack(Ys)
    N = len(pooled)
    _, sv, vt = np.linalg.svd(pooled, full_matrices=False)
    phi = vt[:K].T * sv[:K] / math.sqrt(N)
    resid = np.maximum(pooled.var(axis=0) - np.sum(phi**2, axis=1), 0.05 * pooled.var(axis=0) + 1e-6)
    A = [0.1 * rng.standard_normal((K, j)) for j in J]
    return phi, A, np.log(resid)


def fit_sufa(
    ds: MultiStudyDataset,
    K: int,
    ctrl: McmcControl,
    J=None,
    hmc: HmcConfig | None = None,
    remainder: str = "drop",
) -> SufaFit:
    """HMC-within-Gibbs sampler for SUFA.

    Args:
        K: number of shared loading columns.
        J: per-study subspace dimensions; default floor(K / S) each.
        hmc: leapfrog settings; the step size is dual-averaged during burn-in only.
        remainder: how the default J treats K mod S ("drop" or "spread").
    """
    hmc = hmc or HmcConfig()
    P, S = ds.P, ds.S
    if not 1 <= K <= P:
        raise DimensionError(f"K={K} must lie in [1, P={P}]")
    J = default_j_alloc(K, S, remainder) if J is None else tuple(int(j) for j in J)
    if len(J) != S or any(j < 0 for j in J):
        raise DimensionError("need one non-negative J_s per study")
    if sum(J) > K:
        raise ConfigError(f"identifiability needs sum(J_s) <= K, got {sum(J)} > {K}")
    for s, y in enumerate(ds.studies):
        if np.any(np.abs(y.mean(axis=0)) > 1e-6 * max(1.0, float(y.std(axis=0).max()))):
            warnings.warn(f"study {s} does not look centered; the model has no intercept", stacklevel=2)
            break
    rng = data_rng(ctrl.seed, *ds.studies)
    Ys = [np.asarray(y, dtype=float) for y in ds.studies]
    target = _Target(Ys, K, J)
    phi, A, eta = _init_params(Ys, K, J, rng)
    x = target.pack(phi, A, eta)
    dl = DlState.initial(P, K)
    dl = dl_gibbs_update(dl, phi, rng)
    prior_var = np.maximum(dl.prior_variance(), 1e-12)
    lp, grad = target.logpost(x, prior_var)
    if not np.isfinite(lp):
        raise NumericError("initial SUFA log posterior is not finite")

    da = _DualAveraging(hmc.stepsize, hmc.adapt_target)
    eps = hmc.stepsize
    inv_mass = np.ones(target.dim)
    n_phi = P * K
    # diagonal mass from the posterior variance over a mid burn-in window
    w_lo, w_hi = int(0.25 * ctrl.burn), int(0.6 * ctrl.burn)
    window = []
    T = ctrl.n_keep
    phi_d = np.empty((T, P, K))
    a_d = [np.empty((T, K, j)) for j in J]
    psi_d = np.empty((T, P))
    theta_d = np.empty(T)
    accs, n_bad, t = [], 0, 0
    for it in range(ctrl.nrun):
        # the DL scales are fixed within a trajectory, so folding the prior
        # precision into the Phi block keeps tiny-variance loadings stable
        m_eff = inv_mass.copy()
        m_eff[:n_phi] = 1.0 / (1.0 / inv_mass[:n_phi] + 1.0 / prior_var.ravel())
        x, lp, grad, acc, ok = _hmc_step(target, x, lp, grad, prior_var, eps, hmc.steps, rng, m_eff)
        n_bad += not ok
        if it < ctrl.burn:
            eps = da.update(acc)
            if w_lo <= it < w_hi:
                window.append(x)
            if it == w_hi - 1 and len(window) >= 20:
                m = len(window)
                var = np.var(np.array(window), axis=0)
                inv_mass = (m / (m + 5.0)) * var + 1e-3 * 5.0 / (m + 5.0)
                inv_mass = inv_mass / np.mean(inv_mass)
                da = _DualAveraging(eps, hmc.adapt_target)
                window = []
            if it == ctrl.burn - 1:
                eps = da.final
        else:
            accs.append(acc)
        phi, A, eta = target.unpack(x)
        dl = dl_gibbs_update(dl, phi, rng)
        prior_var = np.maximum(dl.prior_variance(), 1e-12)
        lp, grad = target.logpost(x, prior_var)
        if ctrl.keep(it):
            phi_d[t] = phi
            for s in range(S):
                a_d[s][t] = A[s]
            psi_d[t] = np.exp(eta)
            theta_d[t] = dl.theta_dl
            t += 1
    if n_bad > MAX_REJECT_FRAC * ctrl.nrun:
        raise NumericError(
            f"{n_bad} of {ctrl.nrun} HMC trajectories hit non-finite values",
            diagnostics={"non_finite": n_bad, "stepsize": eps},
        )
    diag = {"stepsize": float(eps), "accept_rate": float(np.mean(accs)) if accs else float("nan"), "non_finite": int(n_bad)}
    return SufaFit(phi_d, tuple(a_d), psi_d, theta_d, J, ctrl, diag)


# ---------------------------------------------------------- point estimates


def _window(fit: SufaFit, frac: float):
    T = fit.phi_draws.shape[0]
    if T == 0:
        raise DimensionError("SUFA fit has no stored draws")
    n = max(1, int(round(frac * T)))
    return np.arange(T - n, T)


def sufa_shared_covariance(fit: SufaFit, include_psi: bool = True, frac: float = 0.2):
    """Posterior mean of Phi Phi' (+ Psi when ``include_psi``) over the last ``frac`` of draws."""
    idx = _window(fit, frac)
    mats = [fit.phi_draws[t] @ fit.phi_draws[t].T + (np.diag(fit.psi_draws[t]) if include_psi else 0.0) for t in idx]
    return mean_cov(mats)


def sufa_aligned_loadings(fit: SufaFit, frac: float = 0.2):
    """Varimax each draw, then permute and sign-match to the first draw of the window."""
    idx = _window(fit, frac)
    rotated = [varimax(fit.phi_draws[t]) for t in idx]
    pivot = rotated[0]
    aligned = np.array([match_to_pivot(r, pivot) for r in rotated])
    return aligned, aligned.mean(axis=0)


def sufa_point_estimates(fit: SufaFit, frac: float = 0.2, include_psi: bool = True) -> FitResult:
    """Window means; Sigma_Phi includes Psi by default, Sigma_Lambda_s = Sigma_s - Sigma_Phi."""
    idx = _window(fit, frac)
    _, phi = sufa_aligned_loadings(fit, frac)
    sig_phi = sufa_shared_covariance(fit, include_psi, frac)
    sig_s = tuple(mean_cov([fit.study_covariance(t, s) for t in idx]) for s in range(fit.S))
    # the study-specific part is the same whether or not Psi sits in Sigma_Phi
    sig_lam = tuple(
        mean_cov([(fit.phi_draws[t] @ fit.a_draws[s][t]) @ (fit.phi_draws[t] @ fit.a_draws[s][t]).T for t in idx])
        for s in range(fit.S)
    )
    lam = tuple(spectral_loadings(m, j) for m, j in zip(sig_lam, fit.j_alloc))
    psi = fit.psi_draws[idx].mean(axis=0)
    return FitResult(
        method="sufa",
        phi=phi,
        lambda_s=lam,
        psi=(psi,) * fit.S,
        sigma_phi=sig_phi,
        sigma_lambda_s=sig_lam,
        sigma_marginal_s=sig_s,
        k_hat=phi.shape[1],
        j_hat=tuple(fit.j_alloc),
        provenance={"nrun": fit.ctrl.nrun, "burn": fit.ctrl.burn, "thin": fit.ctrl.thin, "seed": fit.ctrl.seed,
                    "alignment": "varimax+pivot", "window_draws": int(len(idx))},
        extras=dict(fit.diagnostics),
    )
