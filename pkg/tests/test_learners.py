import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from primalfix.learners import (
    BasisLearner,
    FitError,
    SaturatedLearner,
    TreeEnsembleLearner,
    fit_logistic,
    fit_ols,
)


def test_ols_recovers_coefficients():
    rng = np.random.default_rng(1)
    x = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
    beta = np.array([1.0, -2.0, 0.5])
    fit = fit_ols(x, x @ beta)
    np.testing.assert_allclose(fit.coefficients, beta, atol=1e-10)
    assert not fit.rank_deficient


def test_ols_flags_rank_deficiency():
    x = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    fit = fit_ols(x, np.arange(10.0))
    assert fit.rank_deficient
    assert "rank deficient" in fit.diagnostics
    np.testing.assert_allclose(fit.predict(x), np.arange(10.0), atol=1e-6)


def test_logistic_matches_score_equations():
    rng = np.random.default_rng(2)
    x = np.column_stack([np.ones(2000), rng.normal(size=2000)])
    y = rng.binomial(1, expit(x @ [0.3, -1.0]))
    fit = fit_logistic(x, y)
    assert fit.converged
    np.testing.assert_allclose(x.T @ (y - expit(x @ fit.coefficients)), 0, atol=1e-6)


def test_logistic_flags_separation():
    x = np.column_stack([np.ones(20), np.arange(20.0)])
    y = (np.arange(20) >= 10).astype(float)
    fit = fit_logistic(x, y)
    assert fit.separation
    p = fit.predict(x)
    assert p.min() >= fit.clip and p.max() <= 1 - fit.clip


def test_logistic_rejects_single_class_and_out_of_range():
    x = np.ones((5, 1))
    with pytest.raises(FitError, match="single class"):
        fit_logistic(x, np.zeros(5))
    with pytest.raises(FitError, match=r"\[0, 1\]"):
        fit_logistic(x, np.full(5, 2.0))


def test_logistic_accepts_fractional_response():
    x = np.column_stack([np.ones(4), [0.0, 1.0, 2.0, 3.0]])
    fit = fit_logistic(x, np.array([0.2, 0.4, 0.6, 0.8]))
    assert fit.converged


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_saturated_learner_equals_cell_means(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, size=(60, 2)).astype(float)
    y = rng.normal(size=60)
    model = SaturatedLearner().fit(x, y, "gaussian")
    pred = model.predict(x)
    for cell in np.unique(x, axis=0):
        rows = np.all(x == cell, axis=1)
        np.testing.assert_allclose(pred[rows], y[rows].mean(), atol=1e-12)


def test_saturated_learner_unseen_cell_is_positivity_violation():
    model = SaturatedLearner().fit(np.array([[0.0], [0.0]]), np.array([1.0, 2.0]), "gaussian")
    with pytest.raises(FitError, match="positivity violation"):
        model.predict(np.array([[1.0]]))


def test_basis_learner_interactions_fit_product_term():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(300, 2))
    y = 1 + x[:, 0] * x[:, 1]
    pred = BasisLearner("interactions").fit(x, y, "gaussian").predict(x)
    np.testing.assert_allclose(pred, y, atol=1e-8)


def test_tree_learner_is_seeded_and_clips_probabilities():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(200, 3))
    y = (x[:, 0] > 0).astype(float)
    a = TreeEnsembleLearner(seed=5).fit(x, y, "binomial").predict(x)
    b = TreeEnsembleLearner(seed=5).fit(x, y, "binomial").predict(x)
    np.testing.assert_array_equal(a, b)
    assert a.min() > 0 and a.max() < 1


def test_unknown_family_rejected():
    with pytest.raises(FitError, match="unknown family"):
        BasisLearner().fit(np.zeros((3, 1)), np.zeros(3), "poisson")
