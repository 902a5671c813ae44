"""Shrinkage and allocation priors shared by the samplers.

Four families live here: the multiplicative gamma process (MGPS), the
Dirichlet-Laplace (DL) prior, the moment (non-local) spike-and-slab and the
two-parameter Indian buffet process. Each update kernel is a pure function of
(state, loadings, rng) and returns a fresh state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .errors import DomainError, NumericError

_GAMMA_INVCDF_SHAPE = 1e-3


# ---------------------------------------------------------------- samplers


def gamma_draw(shape, rate, rng):
    """Gamma(shape, rate) draws; tiny shapes go through the inverse CDF."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.all(shape >= _GAMMA_INVCDF_SHAPE):
        return rng.gamma(shape, 1.0 / rate)
    shape, rate = np.broadcast_arrays(shape, rate)
    out = np.empty(shape.shape)
    small = shape < _GAMMA_INVCDF_SHAPE
    out[~small] = rng.gamma(shape[~small], 1.0 / rate[~small])
    u = rng.uniform(size=int(small.sum()))
    out[small] = np.maximum(special.gammaincinv(shape[small], u), np.finfo(float).tiny) / rate[small]
    return out if out.ndim else float(out)


def _gig_unit(lam, omega, rng):
    """Draws from density prop. to x^(lam-1) exp(-omega (x + 1/x) / 2), lam >= 0.

    Rejection sampler on log x with an exponential-uniform-exponential hat
    (Devroye, 2014). Vectorised: only rejected entries are redrawn.
    """
    lam = np.asarray(lam, dtype=float)
    omega = np.asarray(omega, dtype=float)
    lam, omega = np.broadcast_arrays(lam, omega)
    shape = lam.shape
    lam = lam.ravel()
    omega = omega.ravel()
    alpha = np.sqrt(omega**2 + lam**2) - lam

    def psi(x):
        return -alpha * (np.cosh(x) - 1.0) - lam * (np.expm1(x) - x)

    def dpsi(x):
        return -alpha * np.sinh(x) - lam * np.expm1(x)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x = -psi(1.0)
        t = np.where(
            (x >= 0.5) & (x <= 2.0),
            1.0,
            np.where(x > 2.0, np.sqrt(2.0 / (alpha + lam)), np.log(4.0 / (alpha + 2.0 * lam))),
        )
        x = -psi(-1.0)
        inv_lam = np.where(lam > 0, 1.0 / np.where(lam > 0, lam, 1.0), np.inf)
        s_small = np.minimum(inv_lam, np.log1p(1.0 / alpha + np.sqrt(1.0 / alpha**2 + 2.0 / alpha)))
        s = np.where(
            (x >= 0.5) & (x <= 2.0),
            1.0,
            np.where(x > 2.0, np.sqrt(4.0 / (alpha * np.cosh(1.0) + lam)), s_small),
        )
    eta = -psi(t)
    zeta = -dpsi(t)
    theta = -psi(-s)
    xi = dpsi(-s)
    p = 1.0 / xi
    r = 1.0 / zeta
    td = t - r * eta
    sd = s - p * theta
    q = td + sd

    out = np.empty(lam.size)
    todo = np.arange(lam.size)
    for _ in range(1000):
        if todo.size == 0:
            break
        n = todo.size
        U, V, W = rng.uniform(size=(3, n))
        pt, qt, rt = p[todo], q[todo], r[todo]
        tdt, sdt = td[todo], sd[todo]
        tot = pt + qt + rt
        X = np.where(
            U < qt / tot,
            -sdt + qt * V,
            np.where(U < (qt + rt) / tot, tdt - rt * np.log(V), -sdt + pt * np.log(V)),
        )
        chi = np.ones(n)
        hi = X > tdt
        lo = X < -sdt
        chi[hi] = np.exp(-eta[todo][hi] - zeta[todo][hi] * (X[hi] - t[todo][hi]))
        chi[lo] = np.exp(-theta[todo][lo] + xi[todo][lo] * (X[lo] + s[todo][lo]))
        a, l = alpha[todo], lam[todo]
        logf = -a * (np.cosh(X) - 1.0) - l * (np.expm1(X) - X)
        ok = W * chi <= np.exp(logf)
        out[todo[ok]] = X[ok]
        todo = todo[~ok]
    else:
        raise NumericError("GIG rejection sampler failed to converge")
    lo_ = lam / omega
    val = (lo_ + np.sqrt(1.0 + lo_**2)) * np.exp(out)
    return val.reshape(shape)


def gig_draw(lam, rho, chi, rng):
    """Generalised inverse Gaussian with density prop. to x^(lam-1) exp(-(rho x + chi / x) / 2)."""
    lam, rho, chi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lam, rho, chi)))
    omega = np.sqrt(rho * chi)
    scale = np.sqrt(chi / rho)
    out = np.empty(lam.shape)
    # omega -> 0 collapses to a gamma (lam > 0) or inverse gamma (lam < 0) law
    degenerate = omega < 1e-10
    if np.any(degenerate):
        l, r_, c = lam[degenerate], rho[degenerate], chi[degenerate]
        vals = np.empty(l.shape)
        pos = l > 0
        if np.any(pos):
            vals[pos] = gamma_draw(l[pos], r_[pos] / 2.0, rng)
        if np.any(~pos):
            vals[~pos] = (c[~pos] / 2.0) / gamma_draw(np.maximum(-l[~pos], _GAMMA_INVCDF_SHAPE), 1.0, rng)
        out[degenerate] = vals
    reg = ~degenerate
    if np.any(reg):
        l = lam[reg]
        y = _gig_unit(np.abs(l), omega[reg], rng)
        y = np.where(l < 0, 1.0 / y, y)
        out[reg] = scale[reg] * y
    return out if out.ndim else float(out)


def inv_gauss_draw(mean, shape, rng):
    """Inverse Gaussian draws (Michael, Schucany and Haas) without the large-mean cancellation.

    The smaller root mu (1 + a - sqrt(a (2 + a))), a = mu z^2 / (2 lambda), is
    evaluated as mu / (1 + a + sqrt(a (2 + a))), which stays positive for any mu.
    """
    mu, lam = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(shape, dtype=float))
    a = mu * rng.standard_normal(mu.shape) ** 2 / (2.0 * lam)
    x = mu / (1.0 + a + np.sqrt(a * (2.0 + a)))
    flip = rng.uniform(size=mu.shape) * (mu + x) > mu
    x = np.where(flip, mu * (mu / x), x)
    return x if x.ndim else float(x)


# -------------------------------------------------------------------- MGPS


@dataclass(frozen=True)
class MgpsState:
    """Multiplicative gamma process state: local precisions and column increments.

    The global precision of column k is the running product of the increments
    up to k; it is always derived, never stored.
    """

    omega: np.ndarray
    delta: np.ndarray
    kappa: float = 3.0
    a1: float = 2.1
    a2: float = 3.1

    @property
    def theta(self) -> np.ndarray:
        return np.cumprod(self.delta)

    @property
    def shape(self):
        return self.omega.shape

    def precision(self) -> np.ndarray:
        """Prior precision of each loading, omega_pk * theta_k."""
        return self.omega * self.theta[None, :]

    @classmethod
    def initial(cls, P, K, kappa=3.0, a1=2.1, a2=3.1):
        return cls(np.ones((P, K)), np.ones(K), kappa, a1, a2)

    @classmethod
    def from_prior(cls, P, K, rng, kappa=3.0, a1=2.1, a2=3.1):
        omega = rng.gamma(kappa / 2.0, 2.0 / kappa, size=(P, K))
        delta = np.concatenate([rng.gamma(a1, 1.0, size=min(K, 1)), rng.gamma(a2, 1.0, size=max(K - 1, 0))])
        return cls(omega, delta, kappa, a1, a2)

    def keep_columns(self, keep) -> "MgpsState":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        # the kept columns retain their own global precision
        theta = self.theta[keep]
        delta = np.concatenate([theta[:1], theta[1:] / theta[:-1]]) if theta.size else theta
        return replace(self, omega=self.omega[:, keep], delta=delta)


def mgps_column_precisions(state: MgpsState) -> np.ndarray:
    return state.theta


def mgps_gibbs_update(state: MgpsState, loadings, rng) -> MgpsState:
    """One Gibbs sweep of the MGPS hyperparameters given a P x K loading matrix.

    omega_pk ~ Gamma((kappa + 1)/2, rate (kappa + theta_k phi_pk^2)/2)
    delta_1  ~ Gamma(a1 + P K / 2, rate 1 + sum_k tau_k^(1) sum_p omega_pk phi_pk^2 / 2)
    delta_h  ~ Gamma(a2 + P (K - h + 1) / 2, rate 1 + sum_{k>=h} tau_k^(h) sum_p omega_pk phi_pk^2 / 2)
    with tau_k^(h) = prod_{l<=k, l != h} delta_l (Bhattacharya and Dunson, 2011).
    """
    phi = np.asarray(loadings, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise NumericError("non-finite loadings passed to the MGPS update")
    P, K = phi.shape
    phi2 = phi**2
    kappa = state.kappa
    omega = gamma_draw((kappa + 1.0) / 2.0, (kappa + state.theta[None, :] * phi2) / 2.0, rng)
    omega = np.asarray(omega).reshape(P, K)
    col = (omega * phi2).sum(axis=0)
    delta = np.array(state.delta, dtype=float)
    for h in range(K):
        tau = np.cumprod(delta)[h:] / delta[h]
        shape = (state.a1 if h == 0 else state.a2) + 0.5 * P * (K - h)
        rate = 1.0 + 0.5 * float(np.dot(tau, col[h:]))
        delta[h] = gamma_draw(shape, rate, rng)
    return replace(state, omega=omega, delta=delta)


def mgps_log_prior(state: MgpsState, loadings) -> float:
    """Joint log density of (loadings, omega, delta) under the MGPS hierarchy."""
    phi = np.asarray(loadings, dtype=float)
    prec = state.precision()
    k = state.kappa
    out = 0.5 * np.sum(np.log(prec) - np.log(2 * np.pi) - prec * phi**2)
    out += np.sum((k / 2) * np.log(k / 2) - special.gammaln(k / 2) + (k / 2 - 1) * np.log(state.omega) - (k / 2) * state.omega)
    d = state.delta
    if d.size:
        out += (state.a1 - 1) * np.log(d[0]) - d[0] - special.gammaln(state.a1)
        out += np.sum((state.a2 - 1) * np.log(d[1:]) - d[1:] - special.gammaln(state.a2))
    return float(out)


# ---------------------------------------------------------- Dirichlet-Laplace


@dataclass(frozen=True)
class DlState:
    """Dirichlet-Laplace state for a P x K loading matrix with row-shared local scales.

    phi_pk | . ~ N(0, psi_aux_pk * (omega_dl_p * theta_dl)^2), which integrates
    to Laplace(omega_dl_p * theta_dl) over psi_aux ~ Exp(rate 1/2).
    """

    omega_dl: np.ndarray
    theta_dl: float
    psi_aux: np.ndarray
    a_dl: float = 0.5

    def __post_init__(self):
        if not np.all(self.omega_dl > 0) or abs(self.omega_dl.sum() - 1.0) > 1e-10:
            raise DomainError("DL local scales must lie on the open simplex")

    def prior_variance(self) -> np.ndarray:
        return self.psi_aux * (self.omega_dl[:, None] * self.theta_dl) ** 2

    @classmethod
    def initial(cls, P, K, a_dl=0.5):
        return cls(np.full(P, 1.0 / P), float(P), np.ones((P, K)), a_dl)

    @classmethod
    def from_prior(cls, P, K, rng, a_dl=0.5):
        w = rng.dirichlet(np.full(P, a_dl))
        w = np.maximum(w, np.finfo(float).tiny)
        w = w / w.sum()
        theta = rng.gamma(a_dl * P, 2.0)
        psi = rng.exponential(2.0, size=(P, K))
        return cls(w, float(theta), psi, a_dl)


def dl_gibbs_update(state: DlState, loadings, rng) -> DlState:
    """Blocked DL update: omega | phi, then theta | omega, phi, then psi_aux | all.

    T_p ~ GIG(a - K, 1, 2 sum_k |phi_pk|), omega = T / sum(T)
    theta ~ GIG(a P - P K, 1, 2 sum_pk |phi_pk| / omega_p)
    1/psi_pk ~ InvGaussian(omega_p theta / |phi_pk|, 1)
    """
    phi = np.asarray(loadings, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise NumericError("non-finite loadings passed to the DL update")
    P, K = phi.shape
    a = state.a_dl
    absphi = np.maximum(np.abs(phi), 1e-10)
    T = gig_draw(np.full(P, a - K), 1.0, 2.0 * absphi.sum(axis=1), rng)
    T = np.maximum(T, np.finfo(float).tiny)
    omega = T / T.sum()
    omega = np.maximum(omega, np.finfo(float).tiny)
    omega = omega / omega.sum()
    theta = float(gig_draw(a * P - P * K, 1.0, 2.0 * float(np.sum(absphi.sum(axis=1) / omega)), rng))
    mean = omega[:, None] * theta / absphi
    psi = 1.0 / inv_gauss_draw(mean, 1.0, rng)
    return replace(state, omega_dl=omega, theta_dl=theta, psi_aux=psi)


# ------------------------------------------------------ non-local spike-slab


@dataclass(frozen=True)
class NlpSpikeSlabConfig:
    tau0: float = 0.026
    tau1: float = 0.28
    a_zeta: float = 1.0
    b_zeta: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau0 < self.tau1:
            raise DomainError("need 0 < tau0 < tau1")


def nlp_slab_logdensity(phi, tau1):
    """log[(phi^2 / tau1) N(phi; 0, tau1)]; minus infinity at phi = 0."""
    if tau1 <= 0:
        raise DomainError("tau1 must be positive")
    phi = np.asarray(phi, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.log(phi**2 / tau1) - 0.5 * np.log(2 * np.pi * tau1) - phi**2 / (2 * tau1)
    return out if out.ndim else float(out)


def spike_logdensity(phi, tau0):
    phi = np.asarray(phi, dtype=float)
    return -0.5 * np.log(2 * np.pi * tau0) - phi**2 / (2 * tau0)


# -------------------------------------------------------------------- IBP


@dataclass(frozen=True)
class IbpConfig:
    alpha_t: float
    beta_t: float = 1.0

    def __post_init__(self):
        if not (self.alpha_t > 0 and self.beta_t > 0):
            raise DomainError("IBP parameters must be positive")

    @classmethod
    def default_for(cls, S: int) -> "IbpConfig":
        return cls(alpha_t=1.25 * S, beta_t=1.0)

    def new_column_rate(self, S: int) -> float:
        """Poisson mean of brand-new columns for the last of S customers."""
        return self.alpha_t * self.beta_t / (self.beta_t + S - 1)


def ibp_sample_sharing(S: int, config: IbpConfig, rng) -> np.ndarray:
    """Sequential two-parameter IBP draw of an S x K* binary matrix."""
    if S < 1:
        raise DomainError("need at least one study")
    a, b = config.alpha_t, config.beta_t
    columns: list[list[int]] = []
    for s in range(S):
        for col in columns:
            m = sum(col)
            col.append(int(rng.uniform() < m / (b + s)))
        n_new = rng.poisson(a * b / (b + s))
        for _ in range(n_new):
            columns.append([0] * s + [1])
    if not columns:
        return np.zeros((S, 0), dtype=int)
    return np.array(columns, dtype=int).T


def ibp_column_logweight(m, S, beta_t):
    """Log IBP weight of one column owned by m of S rows, up to terms constant in the matrix."""
    m = np.asarray(m, dtype=float)
    return special.gammaln(m) + special.gammaln(S - m + beta_t)
