"""Tetris: combinatorial multi-study factor analysis.

A binary S x K* sharing matrix T says which columns of Phi* each study uses:

    y_is ~ N(0, Phi* T_s Phi*' + Psi_s),   T_s = diag(T[s]).

Columns owned by every study are common; the rest are partially shared or
study-specific. T has a two-parameter IBP prior and Phi* an MGPS prior.

Estimation runs in three phases: (1) Metropolis-within-Gibbs over T and the
continuous parameters, (2) selection of the highest-local-density T, and
(3) a plain Gibbs refit with T fixed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .data import MultiStudyDataset
from .errors import ConfigError, DimensionError, NumericError, ParseError, TimeBudgetExceeded
from .mcmc import McmcControl, data_rng, draw_factors, draw_rows_from_precision, inv_gamma_draw
from .postprocess import FitResult, mean_cov, op_align
from .priors import IbpConfig, MgpsState, ibp_column_logweight, mgps_gibbs_update

CHECKPOINT_FORMAT = "bifa-tetris-checkpoint"
CHECKPOINT_VERSION = 1
RUNAWAY_FACTOR = 5
PSI_SHAPE, PSI_RATE = 1.0, 0.3


class RunawayError(NumericError):
    """The number of sharing columns grew past the hard cap."""


@dataclass(frozen=True)
class SharingMatrix:
    """Binary study-by-column sharing matrix with its derived selectors."""

    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t)
        if t.ndim != 2:
            raise DimensionError("sharing matrix must be S x K*")
        if not np.all((t == 0) | (t == 1)):
            raise ConfigError("sharing matrix must be binary")
        if t.shape[1] and np.any(t.sum(axis=0) == 0):
            raise ConfigError("every sharing column needs at least one study")
        object.__setattr__(self, "t", t.astype(np.int8))

    @property
    def S(self) -> int:
        return self.t.shape[0]

    @property
    def K_star(self) -> int:
        return self.t.shape[1]

    @property
    def common(self) -> np.ndarray:
        """Diagonal of the common projector: columns owned by every study."""
        return self.t.sum(axis=0) == self.S

    def active(self, s: int) -> np.ndarray:
        return self.t[s] == 1

    def residual(self, s: int) -> np.ndarray:
        """Diagonal of R_s = T_s - P."""
        return self.active(s) & ~self.common

    def selector(self, s: int) -> np.ndarray:
        return np.diag(self.t[s].astype(float))

    @property
    def k_hat(self) -> int:
        return int(self.common.sum())

    @property
    def j_hat(self) -> tuple:
        return tuple(int(r) - self.k_hat for r in self.t.sum(axis=1))

    def canonical_order(self) -> np.ndarray:
        """Column permutation sorting columns by their binary pattern, all-ones first."""
        keys = [tuple(-self.t[:, k]) for k in range(self.K_star)]
        return np.array(sorted(range(self.K_star), key=lambda k: keys[k]), dtype=int)

    def canonical(self) -> "SharingMatrix":
        return SharingMatrix(self.t[:, self.canonical_order()])


# --------------------------------------------------------------- mode choice


def _matched_hamming(a, b) -> int:
    """Hamming distance between two sharing matrices under the best column matching."""
    width = max(a.shape[1], b.shape[1])
    A = np.zeros((a.shape[0], width))
    B = np.zeros((b.shape[0], width))
    A[:, : a.shape[1]] = a
    B[:, : b.shape[1]] = b
    cost = A.T @ (1 - B) + (1 - A).T @ B
    r, c = optimize.linear_sum_assignment(cost)
    return int(round(cost[r, c].sum()))


def choose_sharing_mode(t_draws, radius: int = 0) -> SharingMatrix:
    """Draw with the most draws within Hamming distance ``radius``.

    Draws are identified by their canonical column order. The distance
    matches columns optimally (narrower draws are zero-padded), so a single
    flipped entry costs 1 even when it moves the column in the canonical
    order. Ties go to the earliest draw.
    """
    if len(t_draws) == 0:
        raise DimensionError("need at least one sharing-matrix draw")
    canon = [d.canonical() if isinstance(d, SharingMatrix) else SharingMatrix(d).canonical() for d in t_draws]
    # distinct matrices in order of first appearance, with multiplicities
    first, weight, keys = [], [], {}
    for i, c in enumerate(canon):
        key = (c.t.shape, c.t.tobytes())
        if key not in keys:
            keys[key] = len(first)
            first.append(i)
            weight.append(0)
        weight[keys[key]] += 1
    uniq = [canon[i].t for i in first]
    weight = np.array(weight)
    counts = weight.copy()
    if radius > 0:
        for i in range(len(uniq)):
            for j in range(i + 1, len(uniq)):
                if _matched_hamming(uniq[i], uniq[j]) <= radius:
                    counts[i] += weight[j]
                    counts[j] += weight[i]
    return canon[first[int(np.argmax(counts))]]


# -------------------------------------------------------------- likelihood


class _StudyStats:
    """Sufficient statistics for the collapsed study likelihood."""

    def __init__(self, y):
        self.y = y
        self.n, self.P = y.shape
        self.scatter = y.T @ y if self.P <= max(self.n, 300) else None
        self.sdiag = np.sum(y * y, axis=0)

    def smul(self, X):
        return self.scatter @ X if self.scatter is not None else self.y.T @ (self.y @ X)

    def loglik(self, B, psi) -> float:
        """log N(Y; 0, BB' + diag psi) with factors integrated out."""
        P = self.P
        base = self.n * (np.sum(np.log(psi)) + P * math.log(2 * math.pi)) + np.sum(self.sdiag / psi)
        if B.shape[1] == 0:
            return -0.5 * float(base)
        Bw = B / psi[:, None]
        M = np.eye(B.shape[1]) + B.T @ Bw
        L = np.linalg.cholesky(M)
        SBw = self.smul(Bw)
        # tr(Bw M^-1 Bw' S) through the Cholesky factor
        V = np.linalg.solve(L, Bw.T @ SBw)
        quad = np.trace(np.linalg.solve(L, V.T))
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        return -0.5 * float(base + self.n * logdet - quad)


def _log_prior_column(m, S, beta_t):
    return float(ibp_column_logweight(m, S, beta_t))


def flip_sweep(t, phi_star, psi, stats, ibp: IbpConfig, rng, loglik_cache=None):
    """Single-entry MH flips of T for columns that some other study also owns.

    The proposal flips t[s, k]; the target is the collapsed study-s likelihood
    times the IBP column weight. Flips that would empty a column are left to
    the birth/death move. Returns (new t, number of accepted flips).
    """
    t = t.copy()
    S, Ks = t.shape
    accepted = 0
    for s in range(S):
        cur = stats[s].loglik(phi_star[:, t[s] == 1], psi[s]) if loglik_cache is None else loglik_cache[s]
        for k in range(Ks):
            m_other = int(t[:, k].sum() - t[s, k])
            if m_other == 0:
                continue
            m_old = m_other + t[s, k]
            m_new = m_other + 1 - t[s, k]
            t[s, k] ^= 1
            prop = stats[s].loglik(phi_star[:, t[s] == 1], psi[s])
            log_r = prop - cur + _log_prior_column(m_new, S, ibp.beta_t) - _log_prior_column(m_old, S, ibp.beta_t)
            if math.log(rng.uniform()) < log_r:
                cur = prop
                accepted += 1
            else:
                t[s, k] ^= 1
    return t, accepted


def _new_column_prior(mgps: MgpsState, P, n_new, rng):
    """Loadings, local precisions and increments for appended columns drawn from the MGPS prior."""
    k = mgps.kappa
    omega = rng.gamma(k / 2.0, 2.0 / k, size=(P, n_new))
    delta = rng.gamma(mgps.a2 if mgps.delta.size else mgps.a1, 1.0, size=n_new)
    if not mgps.delta.size and n_new:
        delta[1:] = rng.gamma(mgps.a2, 1.0, size=n_new - 1)
    theta0 = mgps.theta[-1] if mgps.delta.size else 1.0
    theta = theta0 * np.cumprod(delta)
    phi = rng.standard_normal((P, n_new)) / np.sqrt(omega * theta[None, :])
    return phi, omega, delta


def birth_death(s, t, phi_star, mgps: MgpsState, psi, stats, ibp: IbpConfig, rng):
    """Replace study s's singleton columns by a Poisson number of fresh ones drawn from the prior.

    Because the proposal is the prior conditional of the singletons, the MH
    ratio reduces to the collapsed likelihood ratio of study s.
    """
    S = t.shape[0]
    P = phi_star.shape[0]
    single = (t[s] == 1) & (t.sum(axis=0) == 1)
    n_new = int(rng.poisson(ibp.new_column_rate(S)))
    if n_new == 0 and not single.any():
        return t, phi_star, mgps, False
    keep = ~single
    phi_new, om_new, de_new = _new_column_prior(mgps.keep_columns(keep), P, n_new, rng)
    B_old = phi_star[:, t[s] == 1]
    B_new = np.hstack([phi_star[:, (t[s] == 1) & keep], phi_new])
    log_r = stats[s].loglik(B_new, psi[s]) - stats[s].loglik(B_old, psi[s])
    if math.log(rng.uniform()) >= log_r:
        return t, phi_star, mgps, False
    kept = mgps.keep_columns(keep)
    mgps = MgpsState(
        np.hstack([kept.omega, om_new]), np.concatenate([kept.delta, de_new]), mgps.kappa, mgps.a1, mgps.a2
    )
    col = np.zeros((S, n_new), dtype=t.dtype)
    col[s] = 1
    return np.hstack([t[:, keep], col]), np.hstack([phi_star[:, keep], phi_new]), mgps, True


def _continuous_sweep(t, phi_star, psi, mgps, Ys, rng):
    """Gibbs updates of factors, Phi*, Psi_s and the MGPS hyperparameters given T."""
    S = len(Ys)
    P, Ks = phi_star.shape
    prec = np.zeros((P, Ks, Ks))
    rhs = np.zeros((P, Ks))
    F = []
    for s, y in enumerate(Ys):
        act = t[s] == 1
        f = np.zeros((len(y), Ks))
        f[:, act] = draw_factors(y, phi_star[:, act], psi[s], rng)
        F.append(f)
        w = 1.0 / psi[s]
        prec += w[:, None, None] * (f.T @ f)[None]
        rhs += (y.T @ f) * w[:, None]
    if Ks:
        prec[:, np.arange(Ks), np.arange(Ks)] += mgps.precision()
        phi_star = draw_rows_from_precision(prec, rhs, rng)
    psi = np.empty((S, P))
    for s, y in enumerate(Ys):
        r = y - F[s] @ phi_star.T
        psi[s] = inv_gamma_draw(PSI_SHAPE + 0.5 * len(y), PSI_RATE + 0.5 * np.einsum("ip,ip->p", r, r), rng)
    if Ks:
        mgps = mgps_gibbs_update(mgps, phi_star, rng)
    return phi_star, psi, mgps


# ------------------------------------------------------------------ fit


@dataclass(frozen=True)
class TetrisFit:
    t_draws: list
    t_hat: SharingMatrix
    phi_star_draws: np.ndarray  # T x P x K*
    psi_draws: np.ndarray  # T x S x P
    ctrl: McmcControl
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phi_star_draws.shape[2] != self.t_hat.K_star:
            raise DimensionError("refit draws must match the selected sharing matrix")

    @property
    def S(self) -> int:
        return self.t_hat.S


def _init_loadings(Ys, k):
    pooled = np.vstack(Ys)
    _, sv, vt = np.linalg.svd(pooled, full_matrices=False)
    k = min(k, len(sv))
    phi = vt[:k].T * sv[:k] / math.sqrt(len(pooled))
    psi = np.array([np.maximum(y.var(axis=0) - np.sum(phi**2, axis=1), 0.05 * y.var(axis=0) + 1e-6) for y in Ys])
    return phi, psi


def _save_checkpoint(path, it, t, phi_star, psi, mgps, rng, t_draws, meta):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": it,
        "t": t.tolist(),
        "phi_star": phi_star.tolist(),
        "psi": psi.tolist(),
        "mgps": {"omega": mgps.omega.tolist(), "delta": mgps.delta.tolist()},
        "rng_state": rng.bit_generator.state,
        "t_draws": [d.t.tolist() for d in t_draws],
        "meta": meta,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    """Read and validate a phase-1 checkpoint written by ``fit_tetris``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path} is not a version-{CHECKPOINT_VERSION} Tetris checkpoint")
    return doc


def fit_tetris(
    ds: MultiStudyDataset,
    ibp: IbpConfig | None = None,
    ctrl: McmcControl | None = None,
    fixed_t: SharingMatrix | None = None,
    k_init: int = 5,
    radius: int = 0,
    refit_ctrl: McmcControl | None = None,
    time_budget: float | None = None,
    checkpoint: str | Path | None = None,
    resume: bool = False,
) -> TetrisFit:
    """Three-phase Tetris sampler.

    Args:
        ibp: IBP hyperparameters; default alpha_T = 1.25 S, beta_T = 1.
        fixed_t: skip phases 1 and 2 and refit with this sharing matrix.
        k_init: number of all-ones columns T starts from; the runaway cap is
            RUNAWAY_FACTOR * S * k_init columns.
        radius: Hamming radius for the mode search.
        refit_ctrl: control of the phase-3 chain; defaults to ``ctrl``.
        time_budget: wall-clock seconds for phase 1. When exceeded the state is
            checkpointed (``checkpoint`` path required) and TimeBudgetExceeded raised.
        resume: continue phase 1 from ``checkpoint``.
    """
    ctrl = ctrl or McmcControl()
    refit_ctrl = refit_ctrl or ctrl
    S, P = ds.S, ds.P
    ibp = ibp or IbpConfig.default_for(S)
    if not 1 <= k_init <= P:
        raise DimensionError(f"k_init={k_init} must lie in [1, P={P}]")
    if time_budget is not None and checkpoint is None:
        raise ConfigError("a time budget needs a checkpoint path")
    Ys = [np.asarray(y, dtype=float) for y in ds.studies]
    stats = [_StudyStats(y) for y in Ys]
    rng = data_rng(ctrl.seed, *Ys)
    diag = {}

    if fixed_t is None:
        cap = RUNAWAY_FACTOR * S * k_init
        meta = {"nrun": ctrl.nrun, "burn": ctrl.burn, "thin": ctrl.thin, "seed": ctrl.seed,
                "alpha_t": ibp.alpha_t, "beta_t": ibp.beta_t, "k_init": k_init}
        if resume:
            doc = load_checkpoint(checkpoint)
            if doc["meta"] != meta:
                raise ConfigError("checkpoint was written with different settings")
            start = doc["iteration"] + 1
            t = np.array(doc["t"], dtype=np.int8).reshape(S, -1)
            phi_star = np.array(doc["phi_star"], dtype=float).reshape(P, -1)
            psi = np.array(doc["psi"], dtype=float)
            mgps = MgpsState(np.array(doc["mgps"]["omega"]).reshape(P, -1), np.array(doc["mgps"]["delta"]))
            rng.bit_generator.state = doc["rng_state"]
            t_draws = [SharingMatrix(np.array(d, dtype=np.int8).reshape(S, -1)) for d in doc["t_draws"]]
        else:
            start = 0
            phi_star, psi = _init_loadings(Ys, k_init)
            t = np.ones((S, phi_star.shape[1]), dtype=np.int8)
            mgps = MgpsState.initial(P, t.shape[1])
            t_draws = []
        t0 = time.monotonic()
        n_flip = n_bd = 0
        for it in range(start, ctrl.nrun):
            phi_star, psi, mgps = _continuous_sweep(t, phi_star, psi, mgps, Ys, rng)
            t, acc = flip_sweep(t, phi_star, psi, stats, ibp, rng)
            n_flip += acc
            for s in range(S):
                t, phi_star, mgps, ok = birth_death(s, t, phi_star, mgps, psi, stats, ibp, rng)
                n_bd += ok
            if t.shape[1] > cap:
                raise RunawayError(
                    f"sharing matrix grew to {t.shape[1]} columns (cap {cap}); try a smaller alpha_T",
                    diagnostics={"iteration": it, "k_star": int(t.shape[1]), "alpha_t": ibp.alpha_t},
                )
            if ctrl.keep(it):
                t_draws.append(SharingMatrix(t.copy()))
            if time_budget is not None and time.monotonic() - t0 > time_budget and it < ctrl.nrun - 1:
                path = _save_checkpoint(checkpoint, it, t, phi_star, psi, mgps, rng, t_draws, meta)
                raise TimeBudgetExceeded(f"phase 1 stopped at iteration {it + 1} of {ctrl.nrun}", checkpoint=str(path))
        if not t_draws:
            raise NumericError("phase 1 kept no draws")
        t_hat = choose_sharing_mode(t_draws, radius)
        diag.update({"flips_accepted": int(n_flip), "birth_death_accepted": int(n_bd),
                     "k_star_trace_mean": float(np.mean([d.K_star for d in t_draws]))})
    else:
        if fixed_t.S != S:
            raise DimensionError("fixed sharing matrix needs one row per study")
        t_draws = []
        t_hat = fixed_t.canonical()

    # phase 3: plain Gibbs with T fixed, restarted from a spectral initialisation
    Ks = t_hat.K_star
    phi_star, psi = _init_loadings(Ys, Ks)
    if phi_star.shape[1] < Ks:
        phi_star = np.hstack([phi_star, np.zeros((P, Ks - phi_star.shape[1]))])
    mgps = MgpsState.initial(P, Ks)
    t = t_hat.t
    T = refit_ctrl.n_keep
    phi_d = np.empty((T, P, Ks))
    psi_d = np.empty((T, S, P))
    i = 0
    for it in range(refit_ctrl.nrun):
        phi_star, psi, mgps = _continuous_sweep(t, phi_star, psi, mgps, Ys, rng)
        if refit_ctrl.keep(it):
            phi_d[i] = phi_star
            psi_d[i] = psi
            i += 1
    return TetrisFit(t_draws, t_hat, phi_d, psi_d, refit_ctrl, diag)


# ---------------------------------------------------------- decomposition


def tetris_decompose(fit: TetrisFit) -> FitResult:
    """Split the refit draws into common and study-specific parts.

    Covariance components are posterior means of Phi* P Phi*', Phi* R_s Phi*'
    and Phi* T_s Phi*' + Psi_s, so Sigma_Phi + Sigma_Lambda_s + Psi_s equals
    Sigma_s exactly. Loadings are OP-aligned means of the matching column blocks.
    """
    tm = fit.t_hat
    S = tm.S
    draws = fit.phi_star_draws
    com = tm.common
    psi = tuple(fit.psi_draws[:, s].mean(axis=0) for s in range(S))
    phi_c = draws[:, :, com]
    sig_phi = mean_cov([d @ d.T for d in phi_c])
    phi = op_align(phi_c)[1] if com.any() else np.zeros((draws.shape[1], 0))
    lam, sig_lam, sig_s = [], [], []
    for s in range(S):
        res = draws[:, :, tm.residual(s)]
        sig_lam.append(mean_cov([d @ d.T for d in res]))
        lam.append(op_align(res)[1] if res.shape[2] else np.zeros((draws.shape[1], 0)))
        sig_s.append(sig_phi + sig_lam[s] + np.diag(psi[s]))
    return FitResult(
        method="tetris",
        phi=phi,
        lambda_s=tuple(lam),
        psi=psi,
        sigma_phi=sig_phi,
        sigma_lambda_s=tuple(sig_lam),
        sigma_marginal_s=tuple(sig_s),
        k_hat=tm.k_hat,
        j_hat=tm.j_hat,
        provenance={"nrun": fit.ctrl.nrun, "burn": fit.ctrl.burn, "thin": fit.ctrl.thin, "seed": fit.ctrl.seed,
                    "alignment": "op", "k_star": tm.K_star},
        extras={"t_hat": tm.t.tolist(), **fit.diagnostics},
    )
