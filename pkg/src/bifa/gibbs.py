"""Gibbs samplers for Stack FA, Ind FA and BMSFA under MGPS shrinkage.

All three models run through one kernel. A chain holds S studies, a common
loading block Phi (P x K) and study blocks Lambda_s (P x J_s):

    y_is = Phi f_is + Lambda_s l_is + e_is,   e_is ~ N(0, Psi_s).

Stack FA is the one-study chain on pooled data with J = 0, and Ind FA runs that
same chain separately for each study.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import MultiStudyDataset
from .errors import DimensionError
from .mcmc import McmcControl, data_rng, draw_factors, draw_rows_from_precision, inv_gamma_draw
from .postprocess import FitResult, evd_num_factors, mean_cov, op_align
from .priors import MgpsState, mgps_gibbs_update

PSI_SHAPE = 1.0
PSI_RATE = 0.3


@dataclass(frozen=True)
class MgpsHyper:
    kappa: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    psi_shape: float = PSI_SHAPE
    psi_rate: float = PSI_RATE


@dataclass
class GibbsState:
    """Mutable per-chain state (loadings, residual variances, shrinkage states)."""

    phi: np.ndarray
    lambdas: list
    psi: np.ndarray  # S x P
    mgps_phi: MgpsState
    mgps_lambda: list
    factors: list = field(default_factory=list)


@dataclass(frozen=True)
class MgpsFit:
    """Thinned post-burn draws of one MGPS model.

    ``phi_draws`` is (T, P, K) or None (Ind FA); ``lambda_draws`` is a list of
    (T, P, J_s) arrays or None (Stack FA); ``psi_draws`` is (T, S, P), with the
    Stack FA residual repeated across studies. Covariance draws are rebuilt on
    demand rather than stored.
    """

    model: str
    phi_draws: np.ndarray | None
    lambda_draws: list | None
    psi_draws: np.ndarray
    ctrl: McmcControl
    study_names: tuple = ()
    variable_names: tuple = ()

    @property
    def n_draws(self) -> int:
        return self.psi_draws.shape[0]

    @property
    def S(self) -> int:
        return self.psi_draws.shape[1]

    @property
    def P(self) -> int:
        return self.psi_draws.shape[2]

    def sigma_marginal_draw(self, t: int, s: int) -> np.ndarray:
        out = np.diag(self.psi_draws[t, s])
        if self.phi_draws is not None:
            out = out + self.phi_draws[t] @ self.phi_draws[t].T
        if self.lambda_draws is not None:
            out = out + self.lambda_draws[s][t] @ self.lambda_draws[s][t].T
        return out

    def sigma_marginal_mean(self, s: int) -> np.ndarray:
        out = np.diag(self.psi_draws[:, s].mean(axis=0))
        if self.phi_draws is not None:
            out = out + np.einsum("tpk,tqk->pq", self.phi_draws, self.phi_draws) / self.n_draws
        if self.lambda_draws is not None:
            lam = self.lambda_draws[s]
            out = out + np.einsum("tpk,tqk->pq", lam, lam) / self.n_draws
        return 0.5 * (out + out.T)


# ------------------------------------------------------------------ kernel


def _svd_init(Ys, K, J, shared_psi):
    pooled = np.vstack(Ys)
    N, P = pooled.shape
    _, sv, vt = np.linalg.svd(pooled, full_matrices=False)
    phi = (vt[:K].T * sv[:K]) / np.sqrt(N)
    lambdas = []
    psi = []
    for y, j in zip(Ys, J):
        r = y - (y @ vt[:K].T) @ vt[:K]
        _, sr, vr = np.linalg.svd(r, full_matrices=False)
        lam = (vr[:j].T * sr[:j]) / np.sqrt(len(y))
        lambdas.append(lam)
        res = r - (r @ vr[:j].T) @ vr[:j]
        v = y.var(axis=0)
        psi.append(np.maximum(res.var(axis=0), 0.05 * v + 1e-6))
    psi = np.array(psi)
    if shared_psi:
        psi[:] = psi.mean(axis=0)
    return phi, lambdas, psi


def init_state(Ys, K, J, hyper: MgpsHyper, shared_psi=False) -> GibbsState:
    phi, lambdas, psi = _svd_init(Ys, K, J, shared_psi)
    P = Ys[0].shape[1]
    return GibbsState(
        phi=phi,
        lambdas=lambdas,
        psi=psi,
        mgps_phi=MgpsState.initial(P, K, hyper.kappa, hyper.a1, hyper.a2),
        mgps_lambda=[MgpsState.initial(P, j, hyper.kappa, hyper.a1, hyper.a2) for j in J],
    )


def gibbs_sweep(state: GibbsState, Ys, rng, hyper: MgpsHyper, shared_psi=False, fix_loadings=False) -> GibbsState:
    """One full Gibbs sweep; factors, loadings, residual variances, shrinkage."""
    S = len(Ys)
    P = Ys[0].shape[1]
    K = state.phi.shape[1]

    # joint draw of common and study factors per study
    F, L = [], []
    for s, y in enumerate(Ys):
        B = np.hstack([state.phi, state.lambdas[s]])
        G = draw_factors(y, B, state.psi[s], rng)
        F.append(G[:, :K])
        L.append(G[:, K:])
    state.factors = [np.hstack([f, l]) for f, l in zip(F, L)]

    if not fix_loadings:
        if K > 0:
            prec = np.zeros((P, K, K))
            rhs = np.zeros((P, K))
            for s, y in enumerate(Ys):
                z = y - L[s] @ state.lambdas[s].T
                w = 1.0 / state.psi[s]
                prec += w[:, None, None] * (F[s].T @ F[s])[None]
                rhs += (z.T @ F[s]) * w[:, None]
            prec[:, np.arange(K), np.arange(K)] += state.mgps_phi.precision()
            state.phi = draw_rows_from_precision(prec, rhs, rng)
        for s, y in enumerate(Ys):
            J = state.lambdas[s].shape[1]
            if J == 0:
                continue
            z = y - F[s] @ state.phi.T
            w = 1.0 / state.psi[s]
            prec = w[:, None, None] * (L[s].T @ L[s])[None]
            prec[:, np.arange(J), np.arange(J)] += state.mgps_lambda[s].precision()
            rhs = (z.T @ L[s]) * w[:, None]
            state.lambdas[s] = draw_rows_from_precision(prec, rhs, rng)

    ss = np.zeros((S, P))
    n = np.zeros(S)
    for s, y in enumerate(Ys):
        r = y - F[s] @ state.phi.T - L[s] @ state.lambdas[s].T
        ss[s] = np.einsum("ip,ip->p", r, r)
        n[s] = len(y)
    if shared_psi:
        draw = inv_gamma_draw(hyper.psi_shape + 0.5 * n.sum(), hyper.psi_rate + 0.5 * ss.sum(axis=0), rng)
        state.psi = np.tile(draw, (S, 1))
    else:
        state.psi = inv_gamma_draw(hyper.psi_shape + 0.5 * n[:, None], hyper.psi_rate + 0.5 * ss, rng)

    if not fix_loadings:
        if K > 0:
            state.mgps_phi = mgps_gibbs_update(state.mgps_phi, state.phi, rng)
        for s in range(S):
            if state.lambdas[s].shape[1] > 0:
                state.mgps_lambda[s] = mgps_gibbs_update(state.mgps_lambda[s], state.lambdas[s], rng)
    return state


def run_chain(Ys, K, J, ctrl: McmcControl, rng, hyper: MgpsHyper | None = None, shared_psi=False, callback=None):
    """Run the shared kernel and return (phi_draws, lambda_draws, psi_draws)."""
    hyper = hyper or MgpsHyper()
    P = Ys[0].shape[1]
    state = init_state(Ys, K, J, hyper, shared_psi)
    T = ctrl.n_keep
    phi_draws = np.empty((T, P, K))
    lam_draws = [np.empty((T, P, j)) for j in J]
    psi_draws = np.empty((T, len(Ys), P))
    t = 0
    for it in range(ctrl.nrun):
        state = gibbs_sweep(state, Ys, rng, hyper, shared_psi)
        if ctrl.keep(it):
            phi_draws[t] = state.phi
            for s in range(len(Ys)):
                lam_draws[s][t] = state.lambdas[s]
            psi_draws[t] = state.psi
            t += 1
        if callback is not None:
            callback(it, state)
    return phi_draws, lam_draws, psi_draws


# ------------------------------------------------------------ public fits


def _check_centered(ds: MultiStudyDataset):
    for s, y in enumerate(ds.studies):
        m = np.abs(y.mean(axis=0))
        if np.any(m > 1e-6 * max(1.0, float(y.std(axis=0).max()))):
            warnings.warn(f"study {s} does not look centered; the model has no intercept", stacklevel=3)
            return


def fit_stack_fa(ds: MultiStudyDataset, K: int, ctrl: McmcControl, hyper: MgpsHyper | None = None) -> MgpsFit:
    """Stack FA: one factor model with shared Phi and Psi on the pooled data."""
    if not 1 <= K <= ds.P:
        raise DimensionError(f"K={K} must lie in [1, P={ds.P}]")
    _check_centered(ds)
    pooled = ds.pooled()
    rng = data_rng(ctrl.seed, pooled)
    phi, _, psi = run_chain([pooled], K, [0], ctrl, rng, hyper)
    psi = np.repeat(psi, ds.S, axis=1)
    return MgpsFit("stackfa", phi, None, psi, ctrl, ds.study_names, ds.variable_names)


def fit_ind_fa(ds: MultiStudyDataset, J, ctrl: McmcControl, hyper: MgpsHyper | None = None) -> MgpsFit:
    """Ind FA: an independent factor model per study; each chain is Stack FA on that study."""
    J = [int(j) for j in J]
    if len(J) != ds.S:
        raise DimensionError("need one J_s per study")
    if any(not 1 <= j <= ds.P for j in J):
        raise DimensionError(f"every J_s must lie in [1, P={ds.P}]")
    _check_centered(ds)
    lams, psis = [], []
    for y, j in zip(ds.studies, J):
        rng = data_rng(ctrl.seed, y)
        phi, _, psi = run_chain([y], j, [0], ctrl, rng, hyper)
        lams.append(phi)
        psis.append(psi[:, 0])
    return MgpsFit("indfa", None, lams, np.stack(psis, axis=1), ctrl, ds.study_names, ds.variable_names)


def fit_bmsfa(ds: MultiStudyDataset, K: int, J, ctrl: McmcControl, hyper: MgpsHyper | None = None) -> MgpsFit:
    """BMSFA: common Phi plus study-specific Lambda_s and Psi_s."""
    J = [int(j) for j in J]
    if len(J) != ds.S:
        raise DimensionError("need one J_s per study")
    if not 1 <= K <= ds.P or any(not 0 <= j <= ds.P for j in J):
        raise DimensionError("factor counts out of range")
    _check_centered(ds)
    rng = data_rng(ctrl.seed, *ds.studies)
    phi, lams, psi = run_chain(list(ds.studies), K, J, ctrl, rng, hyper)
    return MgpsFit("bmsfa", phi, lams, psi, ctrl, ds.study_names, ds.variable_names)


# ---------------------------------------------------------- point estimates


def mgps_point_estimates(fit: MgpsFit, evd_threshold: float = 0.05) -> FitResult:
    """OP-aligned loadings, covariance summaries and EVD factor-count suggestions.

    Sigma_Phi = Phi_hat Phi_hat' and Sigma_Lambda_s = Lambda_hat_s Lambda_hat_s'
    from the aligned means. Sigma_s is the posterior mean of the marginal
    covariance for Stack FA and Ind FA, and the sum of the parts for BMSFA.
    """
    S = fit.S
    psi = tuple(fit.psi_draws[:, s].mean(axis=0) for s in range(S))
    phi = sigma_phi = None
    lam = sig_lam = None
    K = 0
    if fit.phi_draws is not None:
        _, phi = op_align(fit.phi_draws)
        sigma_phi = phi @ phi.T
        K = phi.shape[1]
    if fit.lambda_draws is not None:
        lam = tuple(op_align(d)[1] for d in fit.lambda_draws)
        sig_lam = tuple(l @ l.T for l in lam)
    if fit.model == "bmsfa":
        marg = tuple(sigma_phi + sig_lam[s] + np.diag(psi[s]) for s in range(S))
    else:
        marg = tuple(fit.sigma_marginal_mean(s) for s in range(S))
    extras = {}
    if sigma_phi is not None:
        extras["suggested_k"] = evd_num_factors(sigma_phi, evd_threshold)
    if sig_lam is not None:
        extras["suggested_j"] = tuple(evd_num_factors(m, evd_threshold) if m.any() else 0 for m in sig_lam)
    return FitResult(
        method=fit.model,
        phi=phi,
        lambda_s=lam,
        psi=psi,
        sigma_phi=sigma_phi,
        sigma_lambda_s=sig_lam,
        sigma_marginal_s=tuple(mean_cov([m]) for m in marg),
        k_hat=K,
        j_hat=None if lam is None else tuple(l.shape[1] for l in lam),
        provenance={"nrun": fit.ctrl.nrun, "burn": fit.ctrl.burn, "thin": fit.ctrl.thin, "seed": fit.ctrl.seed, "alignment": "op"},
        extras=extras,
    )
