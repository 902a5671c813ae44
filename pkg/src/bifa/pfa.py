"""Perturbed factor analysis (PFA).

Each study s is mapped onto a reference latent structure by a perturbation
matrix Q_s (Q_1 = I):

    Q_s y_is = Phi eta_is + e_is,   eta_is ~ N(0, V),   e_is ~ N(0, Psi),

so Sigma_s = Q_s^{-1} (Phi V Phi' + Psi) Q_s^{-T}. Priors: MGPS on Phi,
nu_k ~ IG(10, 0.1), psi_p ~ IG(0.1, 0.1), vec(Q_s - I) ~ N(0, alpha_Q^2 I),
alpha_Q ~ IG(0.1, 0.1). Loading columns are pruned adaptively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import MultiStudyDataset
from .errors import DimensionError, GuardRefusal, NumericError, TruncationError
from .mcmc import McmcControl, data_rng, draw_factors, draw_rows_from_precision, inv_gamma_draw
from .postprocess import FitResult, mean_cov, op_align
from .priors import MgpsState, mgps_gibbs_update

P_CAP = 512
Q_COND_MAX = 1e12


@dataclass(frozen=True)
class PfaPriors:
    a_nu: float = 10.0
    b_nu: float = 0.1
    a_psi: float = 0.1
    b_psi: float = 0.1
    a_alpha: float = 0.1
    b_alpha: float = 0.1
    kappa: float = 3.0
    a1: float = 2.1
    a2: float = 3.1


@dataclass(frozen=True)
class PfaFit:
    """Post-burn PFA draws.

    ``phi_draws[t]`` is P x K_t, ``v_draws[t]`` the matching factor variances.
    ``q_draws`` has shape (T, S-1, P, P) for studies 2..S and is ``None`` when
    S = 1; use :meth:`q` to get any study's draw with Q_1 = I.
    """

    phi_draws: list
    v_draws: list
    psi_draws: np.ndarray
    q_draws: np.ndarray | None
    alpha_q_draws: np.ndarray
    k_trace: np.ndarray
    ctrl: McmcControl
    S: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return len(self.phi_draws)

    @property
    def P(self) -> int:
        return self.psi_draws.shape[1]

    def q(self, t: int, s: int) -> np.ndarray:
        if s == 0:
            return np.eye(self.P)
        return self.q_draws[t, s - 1]

    def k_counts(self) -> np.ndarray:
        return np.array([p.shape[1] for p in self.phi_draws])

    def modal_k(self) -> int:
        vals, counts = np.unique(self.k_counts(), return_counts=True)
        return int(vals[np.argmax(counts)])

    def modal_draws(self) -> np.ndarray:
        return np.flatnonzero(self.k_counts() == self.modal_k())


# -------------------------------------------------------------- Q updates


def _alpha_logprior_v(v, a, b):
    # alpha ~ IG(a, b); density of v = alpha^2 is p_alpha(sqrt v) / (2 sqrt v)
    r = np.sqrt(v)
    return stats.invgamma.logpdf(r, a, scale=b) - np.log(2 * r)


def update_alpha_q(Qs, alpha_q, rng, a=0.1, b=0.1):
    """Independence MH in v = alpha_Q^2 with the likelihood-shaped IG proposal."""
    P = Qs[0].shape[0]
    n = len(Qs) * P * P
    ss = max(sum(float(np.sum((Q - np.eye(P)) ** 2)) for Q in Qs), 1e-300)
    v_new = 1.0 / rng.gamma(n / 2.0 - 1.0, 2.0 / ss)
    v_old = alpha_q**2
    log_r = _alpha_logprior_v(v_new, a, b) - _alpha_logprior_v(v_old, a, b)
    if np.log(rng.uniform()) < log_r:
        return float(np.sqrt(v_new)), True
    return alpha_q, False


def _log_power_normal(z, n, mu, var):
    return n * math.log(abs(z)) - 0.5 * (z - mu) ** 2 / var if z != 0 else -math.inf


def _side_proposal(sgn, n, mu, var):
    """Laplace approximation (mode, variance) on one sign side of |z|^n N(z; mu, var)."""
    r = math.sqrt(mu * mu + 4.0 * n * var)
    # roots of z^2 - mu z - n var multiply to -n var; take the far root without cancellation
    far = 0.5 * (mu + math.copysign(r, mu if mu != 0 else sgn))
    mode = far if far * sgn > 0 else -n * var / far
    if mode == 0.0:
        return 0.0, 0.0
    return mode, 1.0 / (n / mode**2 + 1.0 / var)


def _log_normal(z, mean, var):
    return -0.5 * math.log(var) - 0.5 * (z - mean) ** 2 / var


def _draw_power_normal(z_old, n, mu, var, normal, uniform, side_u=0.0):
    """One independence-MH move for density prop. to |z|^n exp(-(z - mu)^2 / (2 var)).

    The proposal mixes the Laplace approximations at the positive and negative
    modes, weighted by their approximate masses, so both sides are reachable.
    ``normal``, ``uniform`` and ``side_u`` are the pre-drawn variates for this move.
    """
    sides = [_side_proposal(sg, n, mu, var) for sg in (1.0, -1.0)]
    lw = np.array([_log_power_normal(m, n, mu, var) + 0.5 * math.log(v) if v > 0 else -math.inf for m, v in sides])
    w = np.exp(lw - lw.max())
    w /= w.sum()

    def log_q(z):
        terms = [math.log(wk) + _log_normal(z, m, v) for wk, (m, v) in zip(w, sides) if wk > 0]
        return float(np.logaddexp.reduce(terms))

    mode, prop_var = sides[0] if side_u < w[0] else sides[1]
    z_new = mode + math.sqrt(prop_var) * normal
    if z_new == 0.0:
        return z_old, False
    log_r = _log_power_normal(z_new, n, mu, var) + log_q(z_old) - _log_power_normal(z_old, n, mu, var) - log_q(z_new)
    if math.log(uniform) < log_r:
        return z_new, True
    return z_old, False


class _StudyQ:
    """Row-wise Q_s sampler with a cached eigendecomposition of Y'Y."""

    def __init__(self, Y):
        self.Y = Y
        self.N = Y.shape[0]
        evals, self.U = np.linalg.eigh(Y.T @ Y)
        self.evals = np.clip(evals, 0.0, None)
        self.UtYt = self.U.T @ Y.T  # P x N

    def sweep(self, Q, Qinv, target, psi, alpha_q, rng):
        """Row-wise update of Q given the latent means ``target`` (N x P).

        With the other rows fixed, row p has conditional density
        |q'c|^N N(q; m, A^{-1}), where c = Q^{-1}[:, p] (determinant lemma),
        A = Y'Y / psi_p + I / alpha^2 and m = A^{-1}(Y' t_p / psi_p + e_p / alpha^2).
        Only the scalar z = q'c is non-Gaussian: z is drawn by independence MH
        from Laplace approximations, then q | z exactly.

        Returns:
            number of accepted z moves.
        """
        P = Q.shape[0]
        a2 = alpha_q**2
        accepted = 0
        UtYtT = self.UtYt @ target
        xs = rng.standard_normal((P, P))
        zs = rng.standard_normal(P)
        us = rng.uniform(size=P)
        sides = rng.uniform(size=P)
        for p in range(P):
            d = self.evals / psi[p] + 1.0 / a2
            b = UtYtT[:, p] / psi[p] + self.U[p] / a2
            m = self.U @ (b / d)
            c = Qinv[:, p].copy()
            Ainv_c = self.U @ ((self.U.T @ c) / d)
            mu = float(m @ c)
            var = float(c @ Ainv_c)
            z_old = float(Q[p] @ c)
            z_new, ok = _draw_power_normal(z_old, self.N, mu, var, zs[p], us[p], sides[p])
            accepted += int(ok)
            x = self.U @ (xs[p] / np.sqrt(d))
            q_new = m + x + Ainv_c * (z_new - mu - float(x @ c)) / var
            # Sherman-Morrison for the row replacement Q + e_p (q_new - q_old)'
            w = (q_new - Q[p]) @ Qinv
            Qinv -= np.outer(c, w) / (1.0 + w[p])
            Q[p] = q_new
        return accepted


# ------------------------------------------------------------------ sampler


def fit_pfa(
    ds: MultiStudyDataset,
    K: int,
    ctrl: McmcControl,
    cutoff: float = 1e-3,
    alpha_q: float | None = None,
    priors: PfaPriors | None = None,
    allow_large_p: bool = False,
) -> PfaFit:
    """Gibbs sampler with perturbation matrices and adaptive truncation.

    Args:
        K: initial number of loading columns.
        cutoff: columns whose mean |phi| falls below this are dropped
            (from iteration 0.2 * nrun onward; the count never increases).
        alpha_q: fix the perturbation scale instead of sampling it.
        allow_large_p: run even when P exceeds the dense-inversion cap.
    """
    pr = priors or PfaPriors()
    P, S = ds.P, ds.S
    if P > P_CAP and not allow_large_p:
        raise GuardRefusal(f"PFA refuses P={P} > {P_CAP}: dense P x P inversions per draw; pass allow_large_p to override")
    if not 1 <= K <= P:
        raise DimensionError(f"K={K} must lie in [1, P={P}]")
    rng = data_rng(ctrl.seed, *ds.studies)
    Ys = [np.asarray(y) for y in ds.studies]
    N = sum(len(y) for y in Ys)

    pooled = np.vstack(Ys)
    _, sv, vt = np.linalg.svd(pooled, full_matrices=False)
    phi = (vt[:K].T * sv[:K]) / np.sqrt(N)
    res = pooled - (pooled @ vt[:K].T) @ vt[:K]
    psi = np.maximum(res.var(axis=0), 0.05 * pooled.var(axis=0) + 1e-6)
    nu = np.ones(K)
    mgps = MgpsState.initial(P, K, pr.kappa, pr.a1, pr.a2)
    a_q = 0.1 if alpha_q is None else float(alpha_q)
    Qs = [np.eye(P) for _ in range(S - 1)]
    Qinvs = [np.eye(P) for _ in range(S - 1)]
    samplers = [_StudyQ(y) for y in Ys[1:]]

    T = ctrl.n_keep
    phi_draws, v_draws = [], []
    psi_draws = np.empty((T, P))
    q_draws = np.empty((T, S - 1, P, P)) if S > 1 else None
    a_draws = np.empty(T)
    k_trace = np.empty(ctrl.nrun, dtype=int)
    diag = {"q_rejected_singular": 0, "q_row_accept": 0, "q_row_total": 0, "alpha_accept": 0, "alpha_total": 0}
    trunc_start = int(0.2 * ctrl.nrun)
    t = 0
    for it in range(ctrl.nrun):
        Zs = [Ys[0]] + [y @ Q.T for y, Q in zip(Ys[1:], Qs)]
        # factors with prior N(0, diag(nu)): rescale loadings so the kernel's N(0, I) applies
        sq = np.sqrt(nu)
        etas = [draw_factors(z, phi * sq, psi, rng) * sq for z in Zs]
        Z = np.vstack(Zs)
        E = np.vstack(etas)
        prec = np.broadcast_to((E.T @ E)[None], (P, len(nu), len(nu))) / psi[:, None, None]
        prec = prec.copy()
        prec[:, np.arange(len(nu)), np.arange(len(nu))] += mgps.precision()
        rhs = (Z.T @ E) / psi[:, None]
        phi = draw_rows_from_precision(prec, rhs, rng)
        r = Z - E @ phi.T
        psi = inv_gamma_draw(pr.a_psi + 0.5 * N, pr.b_psi + 0.5 * np.einsum("ip,ip->p", r, r), rng)
        nu = inv_gamma_draw(pr.a_nu + 0.5 * N, pr.b_nu + 0.5 * np.sum(E**2, axis=0), rng)
        mgps = mgps_gibbs_update(mgps, phi, rng)

        # perturbation matrices: regress on the latent mean Phi eta
        for j, smp in enumerate(samplers):
            target = etas[j + 1] @ phi.T
            Q_old, Qi_old = Qs[j].copy(), Qinvs[j].copy()
            acc = smp.sweep(Qs[j], Qinvs[j], target, psi, a_q, rng)
            diag["q_row_accept"] += acc
            diag["q_row_total"] += P
            if np.linalg.cond(Qs[j]) > Q_COND_MAX:
                Qs[j], Qinvs[j] = Q_old, Qi_old
                diag["q_rejected_singular"] += 1
            else:
                Qinvs[j] = np.linalg.inv(Qs[j])
        if alpha_q is None and S > 1:
            a_q, ok = update_alpha_q(Qs, a_q, rng, pr.a_alpha, pr.b_alpha)
            diag["alpha_accept"] += int(ok)
            diag["alpha_total"] += 1

        if it >= trunc_start:
            keep = np.mean(np.abs(phi), axis=0) >= cutoff
            if not np.all(keep):
                if not np.any(keep):
                    raise TruncationError(f"all loading columns truncated at iteration {it}", diagnostics=diag)
                phi, nu = phi[:, keep], nu[keep]
                mgps = mgps.keep_columns(keep)
        k_trace[it] = phi.shape[1]
        if not np.all(np.isfinite(phi)):
            raise NumericError(f"non-finite loadings at iteration {it}", diagnostics=diag)

        if ctrl.keep(it):
            phi_draws.append(phi.copy())
            v_draws.append(nu.copy())
            psi_draws[t] = psi
            if q_draws is not None:
                q_draws[t] = np.array(Qs)
            a_draws[t] = a_q
            t += 1
    return PfaFit(phi_draws, v_draws, psi_draws, q_draws, a_draws, k_trace, ctrl, S, diag)


# ---------------------------------------------------------- post-processing


def pfa_study_covariances(fit: PfaFit, draws=None):
    """Posterior-mean covariances over the modal-K draws.

    Returns:
        (sigma_s, sigma_phi, sigma_lambda_s): per-study marginal covariances,
        the shared Phi V Phi' + Psi, and sigma_s - sigma_phi.
    """
    idx = fit.modal_draws() if draws is None else np.asarray(draws)
    if len(idx) == 0:
        raise DimensionError("no draws to summarise")
    P = fit.P
    sig_phi = np.zeros((P, P))
    sig_s = [np.zeros((P, P)) for _ in range(fit.S)]
    for t in idx:
        phi, v = fit.phi_draws[t], fit.v_draws[t]
        sp = (phi * v) @ phi.T + np.diag(fit.psi_draws[t])
        sig_phi += sp
        sig_s[0] += sp
        for s in range(1, fit.S):
            try:
                a = np.linalg.solve(fit.q(t, s), sp)
                sig_s[s] += np.linalg.solve(fit.q(t, s), a.T)
            except np.linalg.LinAlgError:
                raise NumericError(f"singular perturbation matrix for study {s} at draw {t}") from None
    n = len(idx)
    sig_phi = mean_cov([sig_phi / n])
    sig_s = [mean_cov([m / n]) for m in sig_s]
    return tuple(sig_s), sig_phi, tuple(m - sig_phi for m in sig_s)


def pfa_experimental_lambda(fit: PfaFit):
    """(Q_s^{-1} - I) Phi V^{1/2} averaged after OP alignment.

    Experimental: these "study-specific loadings" vanish for the reference
    study by construction and are not comparable across methods.
    """
    idx = fit.modal_draws()
    out = []
    for s in range(fit.S):
        stack = [
            (np.linalg.inv(fit.q(t, s)) - np.eye(fit.P)) @ (fit.phi_draws[t] * np.sqrt(fit.v_draws[t])) for t in idx
        ]
        out.append(op_align(stack)[1])
    return tuple(out)


def pfa_point_estimates(fit: PfaFit) -> FitResult:
    idx = fit.modal_draws()
    stack = np.array([fit.phi_draws[t] * np.sqrt(fit.v_draws[t]) for t in idx])
    _, phi = op_align(stack)
    sig_s, sig_phi, sig_lam = pfa_study_covariances(fit, idx)
    psi = fit.psi_draws[idx].mean(axis=0)
    return FitResult(
        method="pfa",
        phi=phi,
        lambda_s=None,
        psi=(psi,) * fit.S,
        sigma_phi=sig_phi,
        sigma_lambda_s=sig_lam,
        sigma_marginal_s=sig_s,
        k_hat=phi.shape[1],
        provenance={"nrun": fit.ctrl.nrun, "burn": fit.ctrl.burn, "thin": fit.ctrl.thin, "seed": fit.ctrl.seed,
                    "alignment": "op", "kept_draws": int(len(idx))},
        extras={"alpha_q": float(fit.alpha_q_draws.mean()), **fit.diagnostics},
    )
