import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bifa.bench.metrics import rv_coefficient
from bifa.bench.scenarios import ScenarioSpec, generate_scenario
from bifa.data import MultiStudyDataset
from bifa.errors import DimensionError
from bifa.momss import (
    MomssFit,
    _best_root,
    _design,
    _ls_evd_init,
    cv_folds,
    fit_momss,
    momss_effective_k,
    momss_point_estimates,
    momss_select_init,
)
from bifa.priors import NlpSpikeSlabConfig
from conftest import make_dataset

NLP = NlpSpikeSlabConfig()


def factor_data(rng, S=2, N=150, P=10, K=2, noise=0.3, shift=None):
    phi = rng.uniform(0.6, 1.0, size=(P, K)) * rng.choice([-1, 1], size=(P, K))
    phi[rng.uniform(size=(P, K)) < 0.4] = 0.0
    out = []
    for s in range(S):
        y = rng.normal(size=(N, K)) @ phi.T + noise * rng.normal(size=(N, P))
        if shift is not None:
            y = y + shift[s]
        out.append(y)
    return out, phi


def fake_fit(gamma):
    P, K = gamma.shape
    return MomssFit(np.ones((P, K)), gamma, np.zeros((P, 1)), np.zeros((P, 0)), (np.ones(P),), np.full(K, 0.5), np.zeros(1), "varimax")


@settings(max_examples=200, deadline=None)
@given(st.floats(0.1, 100), st.floats(-50, 50), st.floats(0, 30))
def test_best_root_is_global_maximiser(A, B, g):
    x = float(_best_root(np.array(A), np.array(B), np.array(g)))
    grid = np.concatenate([np.linspace(-60, 60, 20001), [x]])
    grid = grid[grid != 0] if g > 0 else grid
    with np.errstate(divide="ignore"):
        obj = -0.5 * A * grid**2 + B * grid + (g * np.log(grid**2) if g > 0 else 0.0)
    best = obj[-1]
    assert best >= obj.max() - 1e-9 * max(1.0, abs(best))


def test_effective_k_examples():
    assert momss_effective_k(fake_fit(np.zeros((4, 3)))) == 0
    assert momss_effective_k(fake_fit(np.ones((4, 3)))) == 3


def test_selected_columns_ordered_by_inclusion_count():
    gamma = np.array([[0.9, 0.9, 0.1], [0.1, 0.9, 0.1], [0.1, 0.9, 0.6]])
    fit = fake_fit(gamma)
    fit.phi[:] = np.arange(3)[None, :]
    res = momss_point_estimates(fit)
    assert res.k_hat == 3
    np.testing.assert_array_equal(res.phi[0], [1, 0, 2])


def test_cv_folds_partition_and_determinism():
    a = cv_folds((23, 17), seed=4)
    b = cv_folds((23, 17), seed=4)
    for x, y, n in zip(a, b, (23, 17)):
        np.testing.assert_array_equal(x, y)
        assert len(x) == n and set(x) == set(range(10))
        assert np.bincount(x).max() - np.bincount(x).min() <= 1


def test_init_tie_goes_to_varimax(rng):
    # K = 1: varimax is the identity, so the two initialisations coincide exactly
    y = rng.normal(size=(40, 5))
    out = momss_select_init(make_dataset([y, y.copy()]), 1)
    assert out["scores"]["varimax"] == out["scores"]["plain"]
    assert out["choice"] == "varimax"


def test_inits_recover_rank_one_direction(rng):
    v = rng.normal(size=6)
    v /= np.linalg.norm(v)
    y = 3 * rng.normal(size=(200, 1)) * v + 1e-3 * rng.normal(size=(200, 6))
    ds = make_dataset([y])
    for vm in (True, False):
        prm = _ls_evd_init([y], _design(ds), 1, vm)
        cos = abs(prm.phi[:, 0] @ v) / np.linalg.norm(prm.phi)
        assert cos > 0.99


def test_em_monotone_and_converges(rng):
    studies, _ = factor_data(rng, S=3, N=80, P=8, K=2, shift=[0.0, 2.0, -1.0])
    fit = fit_momss(make_dataset(studies), 4, NLP, max_iter=300)
    assert np.all(np.diff(fit.trace) >= -1e-8)
    assert fit.converged
    assert np.all((fit.gamma_prob >= 0) & (fit.gamma_prob <= 1))
    assert all(np.all(p > 0) for p in fit.psi)


def test_intercept_absorbs_study_shift(rng):
    P, N, c = 6, 300, 3.0
    studies, _ = factor_data(rng, S=2, N=N, P=P, K=1, noise=0.5)
    studies = [y - y.mean(axis=0) for y in studies]
    studies[1] = studies[1] + c
    fit = fit_momss(make_dataset(studies), 1, NLP)
    se = np.sqrt(np.diag(np.cov(studies[1].T)) / N)
    assert np.all(np.abs(fit.alpha[:, 1] - c) < 3 * se)


def test_centered_data_gives_small_intercepts(rng):
    studies, _ = factor_data(rng, S=2, N=200, P=8, K=2)
    studies = [y - y.mean(axis=0) for y in studies]
    fit = fit_momss(make_dataset(studies), 2, NLP)
    for s in range(2):
        assert np.linalg.norm(fit.alpha[:, s]) < 1e-3 * math.sqrt(8)


def test_selected_loadings_are_nonlocal(rng):
    studies, _ = factor_data(rng, S=2, N=200, P=10, K=2)
    fit = fit_momss(make_dataset(studies), 3, NLP)
    sel = fit.gamma_prob > 0.99
    assert sel.any()
    assert np.all(np.abs(fit.phi[sel]) > math.sqrt(NLP.tau0))


def test_irrelevant_covariate_leaves_loadings(rng):
    studies, _ = factor_data(rng, S=2, N=200, P=8, K=2)
    base = fit_momss(make_dataset(studies), 2, NLP)
    x = tuple(rng.normal(size=(200, 1)) for _ in range(2))
    withx = fit_momss(make_dataset(studies, covariates=x), 2, NLP)
    assert rv_coefficient(base.phi, withx.phi) >= 0.99


def test_dimension_guard(rng):
    with pytest.raises(DimensionError):
        fit_momss(make_dataset([rng.normal(size=(20, 3))]), 4, NLP)


@pytest.mark.slow
def test_scenario2_recovers_loadings():
    rvs = []
    for seed in range(5):
        ds, truth = generate_scenario(ScenarioSpec.default(2, seed=seed))
        res = momss_point_estimates(fit_momss(ds, 4, NLP, seed=seed))
        rvs.append(rv_coefficient(res.phi, truth.phi) if res.k_hat else 0.0)
    assert np.median(rvs) >= 0.9
