import math

import mpmath
import numpy as np
import pytest
from scipy import integrate, stats
from hypothesis import given, settings
from hypothesis import strategies as st

from bifa.errors import DomainError, NumericError
from oracles import batch_se
from bifa.priors import (
    DlState,
    IbpConfig,
    MgpsState,
    NlpSpikeSlabConfig,
    dl_gibbs_update,
    gamma_draw,
    gig_draw,
    inv_gauss_draw,
    ibp_column_logweight,
    ibp_sample_sharing,
    mgps_column_precisions,
    mgps_gibbs_update,
    nlp_slab_logdensity,
)


# ------------------------------------------------------------------- MGPS


@pytest.mark.parametrize("delta,theta", [((2, 3, 4), (2, 6, 24)), ((1, 1, 1), (1, 1, 1)), ((0.5, 2), (0.5, 1))])
def test_column_precisions_are_cumulative_products(delta, theta):
    st_ = MgpsState(np.ones((2, len(delta))), np.array(delta, dtype=float))
    np.testing.assert_allclose(mgps_column_precisions(st_), theta, rtol=1e-12)


def test_mgps_omega_matches_direct_gamma_draw():
    state = MgpsState(np.ones((1, 1)), np.ones(1), kappa=3.0)
    new = mgps_gibbs_update(state, np.ones((1, 1)), np.random.default_rng(7))
    oracle = np.random.default_rng(7).gamma(2.0, 1.0 / 2.0)
    assert new.omega[0, 0] == pytest.approx(oracle, rel=1e-14)


def test_mgps_omega_mean_at_zero_loadings(rng):
    kappa = 3.0
    n = 100_000
    state = MgpsState.initial(n, 1, kappa=kappa)
    om = mgps_gibbs_update(state, np.zeros((n, 1)), rng).omega.ravel()
    mean = ((kappa + 1) / 2) / (kappa / 2)
    assert abs(om.mean() - mean) < 3 * om.std(ddof=1) / math.sqrt(n)


def test_mgps_prior_is_stationary(rng):
    # alternating phi | hyper (prior draw) and hyper | phi leaves the joint prior invariant
    P, K, T = 2, 3, 20000
    state = MgpsState.from_prior(P, K, rng)
    th1, th2 = np.empty(T), np.empty(T)
    for t in range(T):
        phi = rng.normal(size=(P, K)) / np.sqrt(state.precision())
        state = mgps_gibbs_update(state, phi, rng)
        th1[t], th2[t] = state.theta[0], state.delta[1]
    assert abs(th1.mean() - 2.1) < 3 * batch_se(th1)
    assert abs(th2.mean() - 3.1) < 3 * batch_se(th2)
    # second moment of a Gamma(a, 1) is a (a + 1)
    assert abs((th1**2).mean() - 2.1 * 3.1) < 3 * batch_se(th1**2)


def test_mgps_rejects_non_finite(rng):
    with pytest.raises(NumericError):
        mgps_gibbs_update(MgpsState.initial(2, 1), np.array([[np.nan], [0.0]]), rng)


# -------------------------------------------------------------- samplers


@pytest.mark.parametrize("lam,rho,chi", [(0.5, 1.0, 2.0), (-1.5, 2.0, 0.5), (-20.0, 1.0, 3.0), (3.0, 0.1, 10.0)])
def test_gig_moments_match_scipy(rng, lam, rho, chi):
    n = 100_000
    x = gig_draw(np.full(n, lam), rho, chi, rng)
    omega, scale = math.sqrt(rho * chi), math.sqrt(chi / rho)
    ref = stats.geninvgauss(lam, omega, scale=scale)
    for fn in (lambda v: v, np.log):
        vals = fn(x)
        oracle = ref.expect(fn)
        assert abs(vals.mean() - oracle) < 3 * vals.std(ddof=1) / math.sqrt(n)


def test_gig_degenerate_limit_is_gamma(rng):
    n = 100_000
    x = gig_draw(np.full(n, 2.0), 2.0, 0.0, rng)
    # omega = 0: Gamma(lam, rate rho / 2) with mean 2
    assert abs(x.mean() - 2.0) < 3 * x.std(ddof=1) / math.sqrt(n)


@pytest.mark.parametrize("mu,lam", [(1.0, 1.0), (0.2, 3.0), (40.0, 1.0)])
def test_inverse_gaussian_matches_scipy(rng, mu, lam):
    n = 200_000
    x = inv_gauss_draw(np.full(n, mu), lam, rng)
    ref = stats.invgauss(mu / lam, scale=lam)
    for fn in (lambda v: np.minimum(v, mu), np.log):
        vals = fn(x)
        assert abs(vals.mean() - ref.expect(fn)) < 3 * vals.std(ddof=1) / math.sqrt(n)


def test_inverse_gaussian_huge_mean_stays_positive(rng):
    # numpy's wald loses every digit here and returns exact zeros
    x = inv_gauss_draw(np.full(10_000, 1e12), 1.0, rng)
    assert np.all(x > 0) and np.all(np.isfinite(x))
    # the large-mean limit is a Levy law: P(x < 1) = P(|z| > 1)
    assert abs(np.mean(x < 1.0) - 2 * stats.norm.sf(1.0)) < 0.02


def test_gamma_tiny_shape_uses_inverse_cdf(rng):
    n = 100_000
    x = gamma_draw(np.full(n, 5e-4), 1.0, rng)
    assert np.all(x > 0) and np.all(np.isfinite(x))
    assert abs(x.mean() - 5e-4) < 3 * x.std(ddof=1) / math.sqrt(n)


# ------------------------------------------------------------ Dirichlet-Laplace


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_dl_simplex_invariant(P, K, seed):
    rng = np.random.default_rng(seed)
    state = DlState.from_prior(P, K, rng)
    phi = rng.normal(size=(P, K)) * rng.choice([0.0, 1.0, 1e-6], size=(P, K))
    new = dl_gibbs_update(state, phi, rng)
    assert abs(new.omega_dl.sum() - 1) < 1e-10
    assert np.all(new.omega_dl > 0) and new.theta_dl > 0 and np.all(new.psi_aux > 0)


def test_dl_concentration_raises_entropy(rng):
    phi = rng.normal(size=(6, 2))

    def mean_entropy(a):
        state = DlState.initial(6, 2, a_dl=a)
        h = []
        for _ in range(10_000):
            state = dl_gibbs_update(state, phi, rng)
            w = state.omega_dl
            h.append(-np.sum(w * np.log(w)))
        return np.mean(h), batch_se(h)

    lo, se_lo = mean_entropy(0.5)
    hi, se_hi = mean_entropy(5.0)
    assert hi - lo > 3 * math.hypot(se_lo, se_hi)


def test_dl_marginal_prior_has_heavy_tails(rng):
    n = 40_000
    phi = np.empty(n)
    for i in range(n):
        st_ = DlState.from_prior(2, 1, rng)
        phi[i] = rng.normal() * math.sqrt(st_.prior_variance()[0, 0])
    k = stats.kurtosis(phi)
    # heavy-tailed: compare against the batch spread of the kurtosis estimate
    batches = np.array([stats.kurtosis(b) for b in phi.reshape(40, -1)])
    assert k > 0 and batches.mean() - 3 * batches.std(ddof=1) / math.sqrt(40) > 0


def test_dl_rejects_bad_simplex():
    with pytest.raises(DomainError):
        DlState(np.array([0.5, 0.6]), 1.0, np.ones((2, 1)))


# ------------------------------------------------------ non-local slab


def test_slab_zero_is_minus_infinity():
    assert nlp_slab_logdensity(0.0, 0.28) == -math.inf


def test_slab_at_root_tau():
    tau1 = 0.28
    assert nlp_slab_logdensity(math.sqrt(tau1), tau1) == pytest.approx(-0.5 * math.log(2 * math.pi * tau1) - 0.5, abs=1e-14)


def test_slab_matches_high_precision():
    mpmath.mp.dps = 50
    phi, tau = mpmath.mpf("0.3"), mpmath.mpf("0.28")
    oracle = mpmath.log(phi**2 / tau * mpmath.npdf(phi, 0, mpmath.sqrt(tau)))
    assert nlp_slab_logdensity(0.3, 0.28) == pytest.approx(float(oracle), abs=1e-13)


@pytest.mark.parametrize("tau1", [0.28, 1.0, 5.0])
def test_slab_normalised(tau1):
    r = 20 * math.sqrt(tau1)
    val, _ = integrate.quad(lambda x: math.exp(nlp_slab_logdensity(x, tau1)), -r, r, points=[0.0], epsabs=1e-12)
    assert abs(val - 1) < 1e-6


def test_slab_domain():
    with pytest.raises(DomainError):
        nlp_slab_logdensity(0.1, 0.0)
    with pytest.raises(DomainError):
        NlpSpikeSlabConfig(tau0=0.3, tau1=0.28)


# -------------------------------------------------------------------- IBP


def test_ibp_single_study_is_poisson(rng):
    a = 2.5
    counts = np.array([ibp_sample_sharing(1, IbpConfig(a), rng).shape[1] for _ in range(20_000)])
    assert abs(counts.mean() - a) < 3 * math.sqrt(a / len(counts))


def test_ibp_harmonic_mean_and_exchangeability(rng):
    S, cfg = 4, IbpConfig.default_for(4)
    draws = [ibp_sample_sharing(S, cfg, rng) for _ in range(10_000)]
    counts = np.array([d.shape[1] for d in draws])
    expected = 5.0 * (1 + 1 / 2 + 1 / 3 + 1 / 4)
    assert abs(counts.mean() - expected) < 3 * counts.std(ddof=1) / math.sqrt(len(counts))
    assert all(d.shape[1] == 0 or d.sum(axis=0).min() >= 1 for d in draws)
    rows = np.array([d.sum(axis=1) for d in draws])
    crit = 1.95 * math.sqrt(2 / len(draws))
    for s in range(1, S):
        assert stats.ks_2samp(rows[:, 0], rows[:, s]).statistic < crit


@pytest.mark.parametrize("S,beta", [(3, 1.0), (5, 2.0)])
def test_ibp_column_weight_gives_flip_odds(S, beta):
    # adding study s to a column held by m others has prior odds m / (beta + S - 1 - m)
    for m in range(1, S):
        d = ibp_column_logweight(m + 1, S, beta) - ibp_column_logweight(m, S, beta)
        assert d == pytest.approx(math.log(m / (beta + S - 1 - m)), abs=1e-12)


def test_ibp_config_domain():
    with pytest.raises(DomainError):
        IbpConfig(0.0)
    assert IbpConfig.default_for(4).alpha_t == 5.0
