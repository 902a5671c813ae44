import math
import time

import numpy as np
import pytest

import bifa.sufa as sufa_mod
from bifa.bench.metrics import rv_coefficient
from bifa.bench.scenarios import ScenarioSpec, generate_scenario
from bifa.data import PreprocessSpec, preprocess
from bifa.errors import ConfigError, DimensionError, NumericError
from bifa.mcmc import McmcControl
from bifa.sufa import (
    SufaFit,
    _Target,
    default_j_alloc,
    fit_sufa,
    loglik_grad_dense,
    loglik_grad_woodbury,
    sufa_aligned_loadings,
    sufa_point_estimates,
    sufa_select_kmax,
)
from conftest import low_rank_studies, make_dataset
from oracles import central_difference_gradient


def scenario3(seed, **kw):
    ds, truth = generate_scenario(ScenarioSpec.default(3, seed=seed, **kw))
    return preprocess(ds, PreprocessSpec()), truth


def dense_reference(y, B, psi):
    sigma = B @ B.T + np.diag(psi)
    _, logdet = np.linalg.slogdet(sigma)
    n, P = y.shape
    return -0.5 * (n * logdet + np.trace(np.linalg.solve(sigma, y.T @ y)) + n * P * math.log(2 * math.pi))


def random_point(target, rng):
    phi = rng.normal(size=(target.P, target.K))
    A = [0.5 * rng.normal(size=(target.K, j)) for j in target.J]
    eta = rng.normal(scale=0.3, size=target.P)
    return target.pack(phi, A, eta)


# ------------------------------------------------------------- likelihood


def test_likelihood_paths_agree(rng):
    P, D = 7, 3
    y = rng.normal(size=(25, P))
    B = rng.normal(size=(P, D))
    psi = rng.uniform(0.3, 2.0, size=P)
    ref = dense_reference(y, B, psi)
    ll_d, gB_d, gp_d = loglik_grad_dense(y.T @ y, len(y), B, psi)
    ll_w, gB_w, gp_w = loglik_grad_woodbury(y, B, psi)
    assert abs(ll_d - ref) < 1e-10 * abs(ref)
    assert abs(ll_w - ref) < 1e-10 * abs(ref)
    np.testing.assert_allclose(gB_w, gB_d, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(gp_w, gp_d, rtol=1e-10, atol=1e-10)


def test_batched_and_data_paths_match_dense(rng, monkeypatch):
    studies, _ = low_rank_studies(rng, 3, 6, 9, 2, 0.5)
    J = (1, 0, 1)
    t_scatter = _Target(studies, 3, J)
    monkeypatch.setattr(sufa_mod, "SCATTER_MAX_P", 0)
    t_data = _Target(studies, 3, J)
    assert t_scatter.dense.all() and not t_data.dense.any()
    x = random_point(t_scatter, rng)
    phi, A, eta = t_scatter.unpack(x)
    ref = 0.0
    for y, a in zip(studies, A):
        B = np.hstack([phi, phi @ a])
        ref += dense_reference(y, B, np.exp(eta))
    for t in (t_scatter, t_data):
        ll, _ = t.loglik(x)
        assert abs(ll - ref) < 1e-10 * abs(ref)
    np.testing.assert_allclose(t_scatter.loglik(x)[1], t_data.loglik(x)[1], rtol=1e-10, atol=1e-9)


@pytest.mark.parametrize("force_data_path", [False, True])
def test_gradient_matches_finite_differences(rng, monkeypatch, force_data_path):
    if force_data_path:
        monkeypatch.setattr(sufa_mod, "SCATTER_MAX_P", 0)
    studies, _ = low_rank_studies(rng, 2, 6 if force_data_path else 40, 8, 2, 0.5)
    target = _Target(studies, 3, (1, 1))
    worst = 0.0
    for _ in range(20):
        x = random_point(target, rng)
        _, g = target.loglik(x)
        fd = central_difference_gradient(lambda z: target.loglik(z)[0], x)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    assert worst < 1e-5


# ----------------------------------------------------------- K and J rules


def test_select_kmax_examples(rng):
    v = rng.normal(size=8)
    assert sufa_select_kmax(make_dataset([rng.normal(size=(50, 1)) * v]), 6) == 1
    # two spikes with variance 9 and 1, everything else exactly zero
    q, _ = np.linalg.qr(rng.normal(size=(10, 10)))
    z = np.linalg.qr(rng.normal(size=(200, 2)))[0] * math.sqrt(200)
    z -= z.mean(axis=0)
    z = np.linalg.qr(z)[0] * math.sqrt(200)
    y = z @ np.diag([3.0, 1.0]) @ q[:, :2].T
    assert sufa_select_kmax(make_dataset([y]), 10) == 2
    noise = rng.normal(size=(2000, 10))
    assert sufa_select_kmax(make_dataset([noise]), 10) >= 9
    assert sufa_select_kmax(make_dataset([noise]), 5) == 5
    with pytest.raises(DimensionError):
        sufa_select_kmax(make_dataset([noise]), 11)


def test_j_allocation_rules():
    assert default_j_alloc(12, 12) == (1,) * 12
    assert default_j_alloc(7, 3) == (2, 2, 2)
    assert default_j_alloc(7, 3, "spread") == (3, 2, 2)
    assert default_j_alloc(2, 4) == (0, 0, 0, 0)
    with pytest.raises(ConfigError):
        default_j_alloc(4, 2, "random")


def test_identifiability_guard(rng):
    studies, _ = low_rank_studies(rng, 2, 30, 6, 2, 0.3)
    ds = make_dataset(studies)
    with pytest.raises(ConfigError):
        fit_sufa(ds, 2, McmcControl(10, 5), J=[2, 1])
    with pytest.raises(DimensionError):
        fit_sufa(ds, 7, McmcControl(10, 5))
    with pytest.raises(ConfigError):
        SufaFit(np.zeros((1, 6, 2)), (np.zeros((1, 2, 2)), np.zeros((1, 2, 1))), np.ones((1, 6)), np.ones(1), (2, 1),
                McmcControl(2, 1))


def test_persistent_nonfinite_trajectories_raise(rng, monkeypatch):
    studies, _ = low_rank_studies(rng, 2, 30, 6, 2, 0.3)

    def broken(target, x, lp, grad, *args):
        return x, lp, grad, 0.0, False

    monkeypatch.setattr(sufa_mod, "_hmc_step", broken)
    with pytest.raises(NumericError):
        fit_sufa(make_dataset(studies), 2, McmcControl(40, 20))


# ---------------------------------------------------------------- sampler


def test_chain_invariants_and_acceptance(rng):
    studies, _ = low_rank_studies(rng, 3, 80, 10, 2, 0.4)
    fit = fit_sufa(make_dataset(studies), 3, McmcControl(600, 300, 1, 1))
    assert fit.j_alloc == (1, 1, 1)
    assert np.all(fit.psi_draws > 0) and np.all(np.isfinite(fit.phi_draws))
    assert 0.6 <= fit.diagnostics["accept_rate"] <= 0.95
    assert fit.diagnostics["non_finite"] <= 0.1 * 600
    again = fit_sufa(make_dataset(studies), 3, McmcControl(600, 300, 1, 1))
    np.testing.assert_array_equal(fit.phi_draws, again.phi_draws)


def test_zero_subspace_truth_gives_small_study_part():
    # Sigma_s sees A_s only through A_s A_s', so the posterior mean of the
    # study part shrinks like N^-1/2; at N_s = 100 it sits near 0.1-0.3
    ds, _ = scenario3(0, a_sd=0.0, N_s=(2000,) * 4)
    res = sufa_point_estimates(fit_sufa(ds, 4, McmcControl(800, 400, 1, 0)))
    norm_phi = np.linalg.norm(res.sigma_phi)
    for m in res.sigma_lambda_s:
        assert np.linalg.norm(m) < 0.1 * norm_phi


# -------------------------------------------------------- point estimates


def fake_fit(phis, As, psis):
    phis = np.array(phis)
    return SufaFit(phis, tuple(np.array(a) for a in As), np.array(psis), np.ones(len(phis)),
                   tuple(a[0].shape[1] for a in As), McmcControl(len(phis) + 1, 1))


def test_single_draw_point_estimates(rng):
    phi = rng.normal(size=(6, 3))
    a = [rng.normal(size=(3, 1)), rng.normal(size=(3, 2))]
    psi = rng.uniform(0.2, 1.0, size=6)
    fit = fake_fit([phi], [[a[0]], [a[1]]], [psi])
    res = sufa_point_estimates(fit)
    np.testing.assert_allclose(res.sigma_phi, phi @ phi.T + np.diag(psi), atol=1e-12)
    for s in range(2):
        lam = phi @ a[s]
        np.testing.assert_allclose(res.sigma_lambda_s[s], lam @ lam.T, atol=1e-12)
        np.testing.assert_allclose(res.sigma_marginal_s[s], phi @ phi.T + lam @ lam.T + np.diag(psi), atol=1e-12)
    assert rv_coefficient(res.phi, phi) > 1 - 1e-10
    np.testing.assert_allclose(res.psi[0], psi)
    ex = sufa_point_estimates(fit, include_psi=False)
    np.testing.assert_allclose(ex.sigma_phi, phi @ phi.T, atol=1e-12)


def test_sign_flipped_draws_align(rng):
    phi = rng.normal(size=(8, 3))
    flipped = phi * np.array([1, -1, -1])
    a = rng.normal(size=(3, 1))
    fit = fake_fit([phi, flipped], [[a, a]], [np.ones(8)] * 2)
    aligned, _ = sufa_aligned_loadings(fit, frac=1.0)
    np.testing.assert_allclose(aligned[0], aligned[1], atol=1e-8)


def test_empty_window_raises():
    fit = SufaFit(np.zeros((0, 4, 2)), (np.zeros((0, 2, 1)),), np.zeros((0, 4)), np.zeros(0), (1,), McmcControl(2, 1))
    with pytest.raises(DimensionError):
        sufa_point_estimates(fit)


# ------------------------------------------------------------------- slow


@pytest.mark.slow
def test_scenario3_recovery():
    shared, specific = [], []
    for seed in range(5):
        ds, truth = scenario3(seed)
        res = sufa_point_estimates(fit_sufa(ds, 4, McmcControl(2000, 1000, 1, seed), J=[1] * 4))
        shared.append(rv_coefficient(res.sigma_phi, truth.sigma_phi))
        specific.append(np.mean([rv_coefficient(a, b) for a, b in zip(res.sigma_lambda_s, truth.sigma_lambda_s)]))
    assert np.median(shared) >= 0.85
    assert np.median(specific) >= 0.5


@pytest.mark.slow
def test_runtime_grows_with_p(rng):
    times = []
    for P in (50, 200):
        studies, _ = low_rank_studies(rng, 2, 100, P, 3, 0.5)
        t0 = time.perf_counter()
        fit_sufa(make_dataset(studies), 4, McmcControl(100, 50))
        times.append(time.perf_counter() - t0)
    assert times[1] > times[0]
