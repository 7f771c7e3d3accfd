import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import expit

from hetbounds.core_data import ConfigError, ObservationTable, make_folds
from hetbounds.nuisance_learners import (DEFAULT_GRID, ConstantSelection, FoldError,
                                         LearnerConfig, LearnerWarning, check_loss, crossfit,
                                         fit_linear_quantile, fit_logistic_selection,
                                         fit_probability_forest, fit_quantile_forest,
                                         weighted_quantiles)


def _lp_quantile(z, y, u):
    """Independent route: the quantile-regression linear program solved by HiGHS."""
    n, k = z.shape
    c = np.r_[np.zeros(k), u * np.ones(n), (1 - u) * np.ones(n)]
    a = sparse.hstack([sparse.csr_matrix(z), sparse.eye(n), -sparse.eye(n)]).tocsc()
    res = linprog(c, A_eq=a, b_eq=y, bounds=[(None, None)] * k + [(0, None)] * (2 * n),
                  method="highs")
    return res.fun


def test_logistic_recovers_interacted_model(rng):
    n = 40000
    x = rng.uniform(size=(n, 2))
    d = rng.integers(0, 2, n).astype(float)
    p = expit(-0.5 + 1.5 * x[:, 0] + 0.8 * d - 1.0 * d * x[:, 1])
    s = (rng.uniform(size=n) < p).astype(float)
    m = fit_logistic_selection(x, d, s)
    xq = rng.uniform(size=(200, 2))
    for arm in (0, 1):
        truth = expit(-0.5 + 1.5 * xq[:, 0] + 0.8 * arm - 1.0 * arm * xq[:, 1])
        assert np.max(np.abs(m.predict(xq, arm) - truth)) < 0.03
    assert m.converged


def test_logistic_constant_outcome_warns():
    x = np.zeros((10, 1))
    with pytest.warns(LearnerWarning):
        m = fit_logistic_selection(x, np.r_[np.zeros(5), np.ones(5)], np.ones(10))
    assert isinstance(m, ConstantSelection)
    assert np.all(m.predict(x, 1) == 1.0)


def test_logistic_needs_both_arms():
    with pytest.raises(FoldError):
        fit_logistic_selection(np.zeros((4, 1)), np.ones(4), np.r_[0, 1, 0, 1])


def test_linear_quantile_matches_linear_program(rng):
    n = 300
    x = rng.uniform(size=(n, 3))
    y = x @ np.array([1.0, -0.5, 0.2]) + (0.5 + x[:, 0]) * rng.standard_normal(n)
    levels = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
    m = fit_linear_quantile(x, y, levels)
    z = np.hstack([np.ones((n, 1)), m.features.transform(x)])
    for j, u in enumerate(levels):
        ours = check_loss(y - z @ m.coef[:, j], u)
        ref = _lp_quantile(z, y, u)
        assert ours <= ref * (1 + 1e-4) + 1e-9, (u, ours, ref)


def test_intercept_only_median_is_exact(rng):
    y = rng.standard_normal(101)
    m = fit_linear_quantile(np.zeros((101, 0)), y, 0.5)
    assert m.coef[0, 0] == pytest.approx(np.median(y), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-5, 5), scale=st.floats(0.2, 5))
def test_linear_quantile_affine_equivariance(shift, scale):
    r = np.random.default_rng(9)
    x = r.uniform(size=(120, 2))
    y = x[:, 0] + r.standard_normal(120)
    levels = np.array([0.25, 0.5, 0.75])
    base = fit_linear_quantile(x, y, levels).predict(x)
    moved = fit_linear_quantile(x, scale * y + shift, levels).predict(x)
    assert np.allclose(moved, scale * base + shift, atol=1e-4 * scale + 1e-6)


def test_weighted_quantiles_equal_weights_match_inverted_cdf(rng):
    y = rng.standard_normal(57)
    w = np.ones((1, 57))
    levels = np.array(DEFAULT_GRID)
    ours = weighted_quantiles(y, w, levels)[0]
    ref = np.quantile(y, levels, method="inverted_cdf")
    assert np.allclose(ours, ref)


def test_probability_forest_step_function(rng):
    n = 4000
    x = rng.uniform(size=(n, 2))
    p = np.where(x[:, 0] < 0.5, 0.2, 0.8)
    s = (rng.uniform(size=n) < p).astype(float)
    f = fit_probability_forest(x, s, n_trees=100, seed=1)
    xq = np.array([[0.2, 0.5], [0.8, 0.5]])
    assert np.allclose(f.predict_target(xq), [0.2, 0.8], atol=0.08)


def test_honest_split_is_disjoint(rng):
    x = rng.uniform(size=(200, 2))
    f = fit_probability_forest(x, (x[:, 0] > 0.5).astype(float), n_trees=5, seed=3)
    for tree, est in zip(f.forest.trees, f.forest.est_index):
        assert len(np.unique(est)) == len(est)
    assert len(f.forest.est_index[0]) == 50


def test_quantile_forest_weights_and_median(rng):
    n = 3000
    x = rng.uniform(size=(n, 1))
    y = 2 * x[:, 0] + 0.1 * rng.standard_normal(n)
    f = fit_quantile_forest(x, y, levels=(0.5,), n_trees=100, seed=2)
    xq = np.array([[0.25], [0.75]])
    w = f.weights(xq)
    assert np.allclose(w.sum(axis=1), 1.0)
    assert np.allclose(f.predict(xq)[:, 0], [0.5, 1.5], atol=0.1)


def _table(n=200, seed=0):
    r = np.random.default_rng(seed)
    x = r.uniform(size=(n, 2))
    d = np.tile([0, 1], n // 2)
    s = (r.uniform(size=n) < 0.8).astype(int)
    return ObservationTable(x, d, s, r.standard_normal(n), 0.5)


class _Memorizer:
    """Predicts 1.0 for rows it was trained on and 0.5 otherwise."""

    def __init__(self, x):
        self.seen = {tuple(r) for r in x}

    def predict(self, x, d=None):
        hit = np.array([tuple(r) in self.seen for r in x], dtype=float)
        return 0.5 + 0.5 * hit


class _MemorizingQuantile(_Memorizer):
    def predict(self, x, d=None):
        base = super().predict(x)
        return np.repeat(base[:, None], len(DEFAULT_GRID), axis=1)


def test_crossfit_never_predicts_on_training_rows():
    t = _table()
    folds = make_folds(t.n, 5, seed=1)
    nu = crossfit(t, folds, LearnerConfig(),
                  select=lambda x, d, s, seed: _Memorizer(x),
                  quant=lambda x, y, levels, seed: _MemorizingQuantile(x))
    assert np.all(nu.s0_hat == 0.5) and np.all(nu.s1_hat == 0.5)
    assert np.all(nu.q1_grid == 0.5) and np.all(nu.q0_grid == 0.5)


def test_crossfit_is_deterministic_and_monotone():
    t = _table(300, seed=4)
    folds = make_folds(t.n, 3, seed=2)
    a = crossfit(t, folds, LearnerConfig())
    b = crossfit(t, folds, LearnerConfig())
    assert np.array_equal(a.q1_grid, b.q1_grid) and np.array_equal(a.s0_hat, b.s0_hat)
    assert np.all(np.diff(a.q1_grid, axis=1) >= 0) and np.all(np.diff(a.q0_grid, axis=1) >= 0)
    assert np.all((a.s0_hat >= 0.01) & (a.s0_hat <= 0.99))


def test_crossfit_missing_selected_controls():
    r = np.random.default_rng(0)
    n = 40
    d = np.tile([0, 1], n // 2)
    s = np.where(d == 1, 1, 0)
    t = ObservationTable(r.uniform(size=(n, 1)), d, s, r.standard_normal(n), 0.5)
    with pytest.raises(FoldError):
        crossfit(t, make_folds(n, 2, 0), LearnerConfig())


def test_crossfit_rejects_too_many_folds():
    t = _table(20)
    folds = make_folds(20, 10, 0)
    with pytest.raises(ConfigError):
        crossfit(t, type(folds)(k=11, fold_of=folds.fold_of, seed=0), LearnerConfig())


def test_learner_config_validation():
    with pytest.raises(ConfigError):
        LearnerConfig(grid=(0.5, 0.4))
    with pytest.raises(ConfigError):
        LearnerConfig(selection_learner="svm")
