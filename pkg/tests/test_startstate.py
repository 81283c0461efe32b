"""Mixture fitting, information-criterion selection, and sampling."""

import itertools

import numpy as np
import pytest

from cogsim.startstate import (
    Cohort,
    CohortFilter,
    GmmModel,
    StartStateError,
    bic,
    fit_cohort_models,
    fit_em,
    n_free_parameters,
    sample,
    select_k,
    snap_indicators,
)
from cogsim.schema import ScalerStats
from cogsim.synth import synth_cohort


def test_single_component_closed_form():
    rng = np.random.default_rng(0)
    x = rng.normal(2.0, 3.0, size=(500, 4))
    m = fit_em(x, 1, seed=1)
    assert np.allclose(m.means[0], x.mean(axis=0), atol=1e-9)
    expected_cov = np.cov(x.T, ddof=0) + 1e-6 * np.eye(4)
    assert np.allclose(m.covariances[0], expected_cov, atol=1e-8)
    assert m.weights[0] == pytest.approx(1.0)


def test_em_loglik_monotone():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-2, 1, (300, 3)), rng.normal(2, 1, (300, 3))])
    m = fit_em(x, 2, seed=3)
    trace = np.array(m.ll_trace)
    assert np.all(np.diff(trace) >= -1e-7)


def test_two_cluster_recovery():
    rng = np.random.default_rng(2)
    centers = np.array([[-3.0] * 5, [3.0] * 5])
    x = np.concatenate([rng.normal(c, 1.0, (1000, 5)) for c in centers])
    m = fit_em(x, 2, seed=4)
    best = min(
        np.abs(m.means[list(p)] - centers).max() for p in itertools.permutations(range(2))
    )
    assert best < 0.1


def test_bic_formula_hand_case():
    data = np.array([[1.0], [2.0], [3.0], [4.0], [5.0]])
    m = fit_em(data, 1, seed=0)
    # independent arithmetic: single-Gaussian MLE with the regularized variance
    mu = 3.0
    var = 2.0 + 1e-6
    ll = np.sum(-0.5 * (np.log(2 * np.pi * var) + (data[:, 0] - mu) ** 2 / var))
    p = n_free_parameters(1, 1)
    assert p == 2
    expected = -2 * ll + p * np.log(5)
    assert bic(m, data) == pytest.approx(expected, rel=1e-9)


def test_bic_penalty_structure():
    """Duplicating the data doubles the fit term and adds p*ln(2) to the penalty."""
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 2))
    m1 = fit_em(x, 1, seed=0)
    p = n_free_parameters(1, 2)
    b_small = bic(m1, x)
    b_large = bic(m1, np.concatenate([x, x]))
    fit_term = b_small - p * np.log(100)  # equals -2 logL on x
    assert b_large == pytest.approx(2 * fit_term + p * np.log(200), rel=1e-12)


def test_bic_monotone_penalty_at_equal_loglik():
    d = 3
    p2 = n_free_parameters(2, d)
    p1 = n_free_parameters(1, d)
    assert p2 > p1


def test_select_k_singleton_range():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 3))
    m = select_k(x, [5], seed=1)
    assert m.k == 5


def test_select_k_recovers_counts():
    rng = np.random.default_rng(5)
    centers = np.stack([np.full(6, -4.0), np.zeros(6), np.full(6, 4.0)])
    x = np.concatenate([rng.normal(c, 1.0, (400, 6)) for c in centers])
    hits = sum(select_k(x, range(1, 6), seed=s).k == 3 for s in range(10))
    assert hits >= 8


def test_fit_em_requires_enough_rows():
    with pytest.raises(StartStateError):
        fit_em(np.zeros((2, 3)), 5, seed=0)


def test_sampling_concentrates_at_mean(schema):
    d = schema.n_features
    mean = np.zeros(d)
    model = GmmModel(
        weights=np.array([1.0]),
        means=mean[None],
        covariances=(1e-9 * np.eye(d))[None],
        log_likelihood=0.0,
        n_samples=10,
        seed=0,
    )
    rng = np.random.default_rng(0)
    draws = np.stack([sample(model, rng, schema).values for _ in range(1000)])
    cont = schema.continuous_mask
    assert draws[:, cont].std(axis=0).max() < 0.01


def test_sample_mixture_mean(schema):
    d = schema.n_features
    rng = np.random.default_rng(1)
    means = np.stack([np.full(d, -1.0), np.full(d, 2.0)])
    covs = np.stack([np.eye(d) * 0.25, np.eye(d) * 0.25])
    weights = np.array([0.3, 0.7])
    model = GmmModel(
        weights=weights, means=means, covariances=covs,
        log_likelihood=0.0, n_samples=10, seed=0,
    )
    draws = np.stack([sample(model, rng, schema).values for _ in range(10000)])
    cont = schema.continuous_mask
    expected = (weights @ means)[cont]
    se = np.sqrt((weights @ (means**2 + 0.25) - (weights @ means) ** 2)[cont] / 10000)
    assert np.all(np.abs(draws[:, cont].mean(axis=0) - expected) < 5 * se)


def test_sample_seeded_determinism(schema):
    d = schema.n_features
    model = GmmModel(
        weights=np.array([1.0]),
        means=np.zeros((1, d)),
        covariances=np.eye(d)[None],
        log_likelihood=0.0,
        n_samples=10,
        seed=0,
    )
    a = sample(model, np.random.default_rng(3), schema).values
    b = sample(model, np.random.default_rng(3), schema).values
    assert np.array_equal(a, b)


def test_snap_indicator_groups(schema):
    rng = np.random.default_rng(2)
    values = rng.normal(size=schema.n_features)
    snapped = snap_indicators(values, schema)
    for idx in schema.onehot_group_indices().values():
        assert snapped[idx].sum() == 1.0
        assert set(np.unique(snapped[idx])) <= {0.0, 1.0}
    cont = schema.continuous_mask
    assert np.array_equal(snapped[cont], values[cont])


def test_cohort_filter_masks():
    mem = np.array([-0.5, -0.1, 0.0, 0.4])
    assert CohortFilter(Cohort.ALL).mask(mem).all()
    assert np.array_equal(CohortFilter(Cohort.IMPAIRED).mask(mem), [True, False, False, False])
    assert np.array_equal(CohortFilter(Cohort.HEALTHY).mask(mem), [False, True, True, True])


def test_cohort_models_and_impaired_sampling(schema):
    trajs = synth_cohort(400, seed=21, schema=schema, missing_rate=0.0)
    rows = np.stack([t.visits[0].state.values for t in trajs])
    stats = ScalerStats.fit(rows, schema)
    models = fit_cohort_models(trajs, stats, schema, k_range=range(1, 4), seed=3)
    assert set(models) == {"all", "healthy", "impaired"}

    rng = np.random.default_rng(4)
    mem_i = schema.memory_index
    raw_mem = []
    m = models["impaired"]
    for _ in range(1000):
        z = sample(m, rng, schema).values
        raw_mem.append(z[mem_i] * stats.std[mem_i] + stats.mean[mem_i])
    frac = np.mean(np.array(raw_mem) < -0.1)
    assert frac >= 0.95


def test_model_round_trip(tmp_path, schema):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(300, schema.n_features))
    m = fit_em(x, 2, seed=1, cohort="healthy")
    path = tmp_path / "gmm.tensors"
    m.save(path, schema.fingerprint())
    loaded = GmmModel.load(path)
    assert loaded.cohort == "healthy"
    assert np.array_equal(loaded.weights, m.weights)
    assert np.array_equal(loaded.means, m.means)
    assert np.array_equal(loaded.covariances, m.covariances)
