"""MOM-SS: factor regression with a non-local spike-and-slab prior, fit by ECM.

    y_is = alpha_s + B x_is + Phi f_is + e_is,   f_is ~ N(0, I),   e_is ~ N(0, Psi_s)

phi_pk | gamma_pk = 1 ~ (phi^2 / tau1) N(phi; 0, tau1)  (moment slab)
phi_pk | gamma_pk = 0 ~ N(0, tau0)                       (spike)
gamma_pk ~ Bernoulli(zeta_k), zeta_k ~ Beta(a / k, b), alpha, B ~ N(0, 1),
psi_ps ~ IG(0.5, 0.5).

The ECM treats f and gamma as missing data; each iteration cannot decrease
the marginal log-posterior of (Phi, zeta, alpha, B, Psi), which is tracked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import MultiStudyDataset
from .errors import DimensionError, NumericError
from .postprocess import FitResult, spectral_loadings, varimax
from .priors import NlpSpikeSlabConfig, nlp_slab_logdensity, spike_logdensity

PSI_A = 0.5
PSI_B = 0.5
REG_VAR = 1.0
ZETA_EPS = 1e-6
N_FOLDS = 10


@dataclass(frozen=True)
class MomssFit:
    phi: np.ndarray
    gamma_prob: np.ndarray
    alpha: np.ndarray  # P x S
    beta: np.ndarray  # P x Q
    psi: tuple  # S vectors of length P
    zeta: np.ndarray
    trace: np.ndarray
    init_choice: str
    init_scores: dict = field(default_factory=dict)
    converged: bool = True

    @property
    def n_iter(self) -> int:
        return len(self.trace)


@dataclass
class _Params:
    phi: np.ndarray
    zeta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    psi: np.ndarray  # S x P


def _design(ds: MultiStudyDataset):
    """Per-study regression designs [study indicator columns, covariates]."""
    S, Q = ds.S, ds.Q
    out = []
    for s, n in enumerate(ds.N):
        d = np.zeros((n, S + Q))
        d[:, s] = 1.0
        if Q:
            d[:, S:] = ds.covariates[s]
        out.append(d)
    return out


def _log_prior_phi(phi, zeta, nlp: NlpSpikeSlabConfig):
    slab = nlp_slab_logdensity(phi, nlp.tau1) + np.log(zeta)
    spike = spike_logdensity(phi, nlp.tau0) + np.log1p(-zeta)
    return np.logaddexp(slab, spike)


def _responsibilities(phi, zeta, nlp):
    slab = nlp_slab_logdensity(phi, nlp.tau1) + np.log(zeta)
    spike = spike_logdensity(phi, nlp.tau0) + np.log1p(-zeta)
    return np.exp(slab - np.logaddexp(slab, spike))


def _zeta_a(K, nlp):
    return nlp.a_zeta / np.arange(1, K + 1)


def log_posterior(Ys, Ds, prm: _Params, nlp: NlpSpikeSlabConfig) -> float:
    """Marginal log-posterior with factors and inclusion indicators integrated out."""
    K = prm.phi.shape[1]
    theta = np.hstack([prm.alpha, prm.beta])
    out = 0.0
    for s, (y, d) in enumerate(zip(Ys, Ds)):
        r = y - d @ theta.T
        psi = prm.psi[s]
        Pw = prm.phi / psi[:, None]
        M = np.eye(K) + prm.phi.T @ Pw
        Lm = np.linalg.cholesky(M)
        u = np.linalg.solve(Lm, (r @ Pw).T)
        quad = np.sum(r * r / psi) - np.sum(u * u)
        logdet = np.sum(np.log(psi)) + 2 * np.sum(np.log(np.diag(Lm)))
        out += -0.5 * (quad + len(y) * (logdet + len(psi) * np.log(2 * np.pi)))
    out += float(np.sum(_log_prior_phi(prm.phi, prm.zeta[None, :], nlp)))
    a = _zeta_a(K, nlp)
    b = nlp.b_zeta
    out += float(np.sum((a - 1) * np.log(prm.zeta) + (b - 1) * np.log1p(-prm.zeta) - special.betaln(a, b)))
    out += float(-0.5 * np.sum(theta**2) / REG_VAR - 0.5 * theta.size * np.log(2 * np.pi * REG_VAR))
    out += float(np.sum(PSI_A * np.log(PSI_B) - special.gammaln(PSI_A) - (PSI_A + 1) * np.log(prm.psi) - PSI_B / prm.psi))
    return out


def _best_root(A, B, g):
    """argmax over phi of -A phi^2 / 2 + B phi + g log phi^2 (g >= 0), vectorised."""
    disc = np.sqrt(B * B + 8.0 * A * g)
    r1 = (B + disc) / (2 * A)
    r2 = (B - disc) / (2 * A)

    def obj(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            slab = np.where(g > 0, g * np.log(x * x), 0.0)
        return -0.5 * A * x * x + B * x + slab

    out = np.where(obj(r1) >= obj(r2), r1, r2)
    return np.where(g > 0, out, B / A)


def ecm_step(Ys, Ds, prm: _Params, nlp: NlpSpikeSlabConfig) -> _Params:
    """One E-step followed by conditional maximisations of Phi, zeta, (alpha, B) and Psi."""
    S = len(Ys)
    P, K = prm.phi.shape
    theta = np.hstack([prm.alpha, prm.beta])
    Ef, Sff, R = [], [], []
    for s, (y, d) in enumerate(zip(Ys, Ds)):
        r = y - d @ theta.T
        Pw = prm.phi / prm.psi[s][:, None]
        Minv = np.linalg.inv(np.eye(K) + prm.phi.T @ Pw)
        ef = (r @ Pw) @ Minv
        Ef.append(ef)
        Sff.append(ef.T @ ef + len(y) * Minv)
        R.append(r)
    g = _responsibilities(prm.phi, prm.zeta[None, :], nlp)

    # loadings: one coordinate pass, columns vectorised over rows
    phi = prm.phi.copy()
    W = 1.0 / prm.psi  # S x P
    C = np.stack([r.T @ ef for r, ef in zip(R, Ef)])  # S x P x K
    Sst = np.stack(Sff)  # S x K x K
    for k in range(K):
        A = Sst[:, k, k] @ W + g[:, k] / nlp.tau1 + (1 - g[:, k]) / nlp.tau0
        cross = np.einsum("pj,sj->sp", phi, Sst[:, :, k]) - phi[:, k][None, :] * Sst[:, k, k][:, None]
        B = np.sum(W * (C[:, :, k] - cross), axis=0)
        # the slab term contributes g log phi^2
        phi[:, k] = _best_root(A, B, g[:, k])

    a = _zeta_a(K, nlp)
    zeta = (g.sum(axis=0) + a - 1.0) / (P + a + nlp.b_zeta - 2.0)
    zeta = np.clip(zeta, ZETA_EPS, 1 - ZETA_EPS)

    # intercepts and covariate effects: per-variable ridge given E[f]
    Z = [y - ef @ phi.T for y, ef in zip(Ys, Ef)]
    G = np.stack([d.T @ d for d in Ds])  # S x m x m
    m = G.shape[1]
    lhs = np.einsum("sp,sab->pab", W, G) + np.eye(m)[None] / REG_VAR
    rhs = sum((Ds[s].T @ Z[s]).T * W[s][:, None] for s in range(S))  # P x m
    theta = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    alpha, beta = theta[:, :S], theta[:, S:]

    psi = np.empty_like(prm.psi)
    for s, (y, d) in enumerate(zip(Ys, Ds)):
        e = y - d @ theta.T - Ef[s] @ phi.T
        n = len(y)
        Minv_part = (Sff[s] - Ef[s].T @ Ef[s])  # n * Cov(f)
        ess = np.sum(e * e, axis=0) + np.einsum("pk,kl,pl->p", phi, Minv_part, phi)
        psi[s] = (PSI_B + 0.5 * ess) / (PSI_A + 1.0 + 0.5 * n)
    return _Params(phi, zeta, alpha, beta, psi)


def _run_em(Ys, Ds, prm, nlp, max_iter, tol, check_divergence=True):
    trace = [log_posterior(Ys, Ds, prm, nlp)]
    drops = 0
    converged = False
    for _ in range(max_iter):
        prm = ecm_step(Ys, Ds, prm, nlp)
        lp = log_posterior(Ys, Ds, prm, nlp)
        if not np.isfinite(lp):
            raise NumericError("non-finite log-posterior in MOM-SS EM", diagnostics={"trace": np.array(trace)})
        if lp < trace[-1] - 1e-6:
            drops += 1
            if check_divergence and drops >= 3:
                raise NumericError("MOM-SS log-posterior decreased on 3 consecutive iterations",
                                   diagnostics={"trace": np.array(trace + [lp])})
        else:
            drops = 0
        change = abs(lp - trace[-1]) / max(1.0, abs(trace[-1]))
        trace.append(lp)
        if change < tol:
            converged = True
            break
    return prm, np.array(trace), converged


# ---------------------------------------------------------- initialisation


def _ls_evd_init(Ys, Ds, K, use_varimax):
    """Least-squares intercepts/covariates, then EVD of the pooled residual covariance."""
    S = len(Ys)
    m = Ds[0].shape[1]
    lhs = sum(d.T @ d for d in Ds) + 1e-8 * np.eye(m)
    rhs = sum(d.T @ y for d, y in zip(Ds, Ys))
    theta = np.linalg.solve(lhs, rhs).T  # P x m
    R = [y - d @ theta.T for y, d in zip(Ys, Ds)]
    pooled = np.vstack(R)
    cov = pooled.T @ pooled / len(pooled)
    phi = spectral_loadings(cov, K)
    if use_varimax and K > 1:
        phi = varimax(phi)
    psi = np.array([np.maximum(np.mean(r * r, axis=0) - np.sum(phi**2, axis=1), 0.05 * np.mean(r * r, axis=0) + 1e-6) for r in R])
    return _Params(phi, np.full(K, 0.5), theta[:, :S].copy(), theta[:, S:].copy(), psi)


def cv_folds(N_s, n_folds=N_FOLDS, seed=0):
    """Per-study stratified fold labels; every row lands in exactly one fold."""
    rng = np.random.default_rng([seed, 10])
    out = []
    for n in N_s:
        lab = np.arange(n) % n_folds
        out.append(lab[rng.permutation(n)])
    return out


def _heldout_loglik(Ys, Ds, prm):
    K = prm.phi.shape[1]
    theta = np.hstack([prm.alpha, prm.beta])
    out = 0.0
    for s, (y, d) in enumerate(zip(Ys, Ds)):
        if len(y) == 0:
            continue
        sig = prm.phi @ prm.phi.T + np.diag(prm.psi[s])
        r = y - d @ theta.T
        L = np.linalg.cholesky(sig)
        u = np.linalg.solve(L, r.T)
        out += -0.5 * (np.sum(u * u) + len(y) * (2 * np.sum(np.log(np.diag(L))) + len(sig) * np.log(2 * np.pi)))
    return out


def momss_select_init(ds: MultiStudyDataset, K: int, nlp: NlpSpikeSlabConfig | None = None,
                      cv_iter: int = 15, seed: int = 0):
    """Choose between LS+EVD initialisations with and without varimax by 10-fold CV.

    Each fold runs a short ECM from each initialisation on the training rows and
    scores the held-out Gaussian log-likelihood. Varimax is kept unless the plain
    start wins by more than two standard errors of the per-fold differences.

    Returns:
        dict with ``choice`` ('varimax' or 'plain'), ``params`` (the full-data
        initialisation), ``scores`` (summed held-out log-likelihoods) and ``folds``.
    """
    nlp = nlp or NlpSpikeSlabConfig()
    if sum(ds.N) < N_FOLDS:
        raise DimensionError("cross-validated initialisation needs at least 10 rows")
    Ys = [np.asarray(y) for y in ds.studies]
    Ds = _design(ds)
    folds = cv_folds(ds.N, seed=seed)
    per_fold = {"varimax": [], "plain": []}
    for f in range(N_FOLDS):
        tr = [lab != f for lab in folds]
        te = [lab == f for lab in folds]
        Ytr = [y[m] for y, m in zip(Ys, tr)]
        Dtr = [d[m] for d, m in zip(Ds, tr)]
        Yte = [y[m] for y, m in zip(Ys, te)]
        Dte = [d[m] for d, m in zip(Ds, te)]
        for name, vm in (("varimax", True), ("plain", False)):
            prm = _ls_evd_init(Ytr, Dtr, K, vm)
            prm, _, _ = _run_em(Ytr, Dtr, prm, nlp, cv_iter, 0.0, check_divergence=False)
            per_fold[name].append(_heldout_loglik(Yte, Dte, prm))
    diff = np.array(per_fold["plain"]) - np.array(per_fold["varimax"])
    se = diff.std(ddof=1) / np.sqrt(N_FOLDS)
    choice = "plain" if diff.mean() > 2 * se else "varimax"
    scores = {k: float(np.sum(v)) for k, v in per_fold.items()}
    return {"choice": choice, "params": _ls_evd_init(Ys, Ds, K, choice == "varimax"), "scores": scores, "folds": folds}


# -------------------------------------------------------------------- fit


def fit_momss(ds: MultiStudyDataset, K: int, nlp: NlpSpikeSlabConfig | None = None,
              max_iter: int = 500, tol: float = 1e-6, init=None, seed: int = 0) -> MomssFit:
    """ECM fit; runs the CV initialisation selection unless ``init`` is given."""
    nlp = nlp or NlpSpikeSlabConfig()
    if not 1 <= K <= min(sum(ds.N) - 1, ds.P):
        raise DimensionError(f"K={K} must lie in [1, min(N-1, P)]")
    Ys = [np.asarray(y) for y in ds.studies]
    Ds = _design(ds)
    if init is None:
        init = momss_select_init(ds, K, nlp, seed=seed)
    prm = _Params(**{k: np.array(v, dtype=float) for k, v in vars(init["params"]).items()})
    prm, trace, converged = _run_em(Ys, Ds, prm, nlp, max_iter, tol)
    g = _responsibilities(prm.phi, prm.zeta[None, :], nlp)
    return MomssFit(
        phi=prm.phi,
        gamma_prob=g,
        alpha=prm.alpha,
        beta=prm.beta,
        psi=tuple(prm.psi),
        zeta=prm.zeta,
        trace=trace,
        init_choice=init["choice"],
        init_scores=init.get("scores", {}),
        converged=converged,
    )


def momss_effective_k(fit: MomssFit, threshold: float = 0.5) -> int:
    """Columns with at least one inclusion probability at or above ``threshold``."""
    return int(np.sum(np.max(fit.gamma_prob, axis=0, initial=0.0) >= threshold)) if fit.gamma_prob.size else 0


def momss_selected_loadings(fit: MomssFit, threshold: float = 0.5):
    """Retained columns, ordered by their number of included loadings (descending)."""
    keep = np.flatnonzero(np.max(fit.gamma_prob, axis=0, initial=0.0) >= threshold) if fit.gamma_prob.size else []
    counts = np.sum(fit.gamma_prob[:, keep] >= threshold, axis=0)
    order = np.asarray(keep, dtype=int)[np.argsort(-counts, kind="stable")]
    return fit.phi[:, order]


def momss_point_estimates(fit: MomssFit, threshold: float = 0.5) -> FitResult:
    phi = momss_selected_loadings(fit, threshold)
    sig_phi = phi @ phi.T
    return FitResult(
        method="momss",
        phi=phi,
        lambda_s=None,
        psi=tuple(fit.psi),
        sigma_phi=sig_phi,
        sigma_lambda_s=None,
        sigma_marginal_s=tuple(sig_phi + np.diag(p) for p in fit.psi),
        k_hat=phi.shape[1],
        provenance={"iterations": fit.n_iter, "converged": fit.converged, "init": fit.init_choice},
        extras={"alpha": fit.alpha, "beta": fit.beta, "gamma_prob": fit.gamma_prob},
    )
