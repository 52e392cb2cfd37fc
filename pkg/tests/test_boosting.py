import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miboost.boosting import (BoostFit, SquaredErrorLoss, _Stack, boost_step, fit_linear_learner,
                              predict, predict_many, run_cwgb, run_miboost,
                              select_component_miboost)
from miboost.data import CompletedDataset


def centered(X):
    return X - X.mean(axis=0)


def random_sets(M=3, n=60, p=5, seed=0, shared_x=False):
    g = np.random.default_rng(seed)
    base = g.standard_normal((n, p))
    out = []
    for m in range(M):
        X = base if shared_x else base + 0.3 * g.standard_normal((n, p))
        y = 2 * X[:, 0] - X[:, 2] + g.standard_normal(n)
        out.append(CompletedDataset(y, centered(X)))
    return out


def test_negative_gradient_matches_finite_differences():
    loss = SquaredErrorLoss()
    g = np.random.default_rng(1)
    y, eta = g.normal(0, 5, 1000), g.normal(0, 5, 1000)
    h = 1e-5
    fd = -(loss.evaluate(y, eta + h) - loss.evaluate(y, eta - h)) / (2 * h)
    np.testing.assert_allclose(loss.negative_gradient(y, eta), fd, atol=1e-6)


def test_learner_exact_fit():
    x = centered(np.arange(6, dtype=float))
    f = fit_linear_learner(2 * x, x)
    assert f.intercept == pytest.approx(0, abs=1e-10)
    assert f.slope == pytest.approx(2, abs=1e-10)
    assert f.rss == pytest.approx(0, abs=1e-10)


def test_learner_constant_regressor():
    u = np.array([1.0, 4.0, 2.0])
    f = fit_linear_learner(u, np.full(3, 7.0))
    assert f.slope == 0.0
    assert f.intercept == pytest.approx(u.mean())
    assert f.rss == pytest.approx(np.sum((u - u.mean()) ** 2))


def test_learner_three_points():
    f = fit_linear_learner([1.0, 0.0, 2.0], [-1.0, 0.0, 1.0])
    assert (f.slope, f.intercept, f.rss) == pytest.approx((0.5, 1.0, 1.5), abs=1e-12)


def test_learner_matches_lstsq():
    g = np.random.default_rng(2)
    x, u = g.standard_normal(30) + 4, g.standard_normal(30)
    A = np.column_stack([np.ones(30), x])
    coef, res, *_ = np.linalg.lstsq(A, u, rcond=None)
    f = fit_linear_learner(u, x)
    assert (f.intercept, f.slope, f.rss) == pytest.approx((coef[0], coef[1], res[0]), rel=1e-10)


def test_selection_examples():
    g = np.random.default_rng(0)
    rss = g.uniform(1, 2, (1, 4))
    assert select_component_miboost(rss) == int(np.argmin(rss[0]))
    dominated = g.uniform(1, 2, (3, 5))
    dominated[:, 2] = 0.0
    assert select_component_miboost(dominated) == 2
    # imputation-major grid: m=1 -> (2, 5), m=2 -> (4, 1); aggregated (6, 6) -> first
    assert select_component_miboost([[2.0, 5.0], [4.0, 1.0]]) == 0


def test_first_step_gradient_is_centered_response():
    data = random_sets()
    fit = run_miboost(data, nu=0.1, t_stop=0)
    stack = _Stack(data)
    eta = np.repeat(fit.offsets[:, None], stack.X.shape[1], axis=1)
    U = SquaredErrorLoss().negative_gradient(stack.Y, eta)
    for m, d in enumerate(data):
        np.testing.assert_allclose(U[m], d.y - d.y.mean(), atol=1e-14)
    r = boost_step(fit, stack, eta)
    assert fit.selection_path == [r]


def test_identical_imputations_give_identical_coefficients():
    d = random_sets(M=1)[0]
    fit = run_miboost([d, d, d], nu=0.1, t_stop=40)
    assert np.all(fit.coefficients == fit.coefficients[0])


def test_single_covariate_full_step_is_ols():
    g = np.random.default_rng(3)
    data = []
    for m in range(3):
        x = centered(g.standard_normal((40, 1)))
        data.append(CompletedDataset(1.5 * x[:, 0] + g.standard_normal(40) + 3, x))
    fit = run_miboost(data, nu=1.0, t_stop=1)
    for m, d in enumerate(data):
        A = np.column_stack([np.ones(40), d.X[:, 0]])
        coef = np.linalg.lstsq(A, d.y, rcond=None)[0]
        fitted = fit.offsets[m] + fit.coefficients[m, 0] + fit.coefficients[m, 1] * d.X[:, 0]
        np.testing.assert_allclose(fitted, A @ coef, atol=1e-10)


def test_t_stop_zero_predicts_mean_of_means():
    data = random_sets()
    fit = run_miboost(data, t_stop=0)
    assert np.all(fit.coefficients == 0)
    assert fit.t_stop == 0
    expected = np.mean([d.y.mean() for d in data])
    assert predict(fit, np.zeros(fit.p)) == pytest.approx(expected)


def test_strong_predictor_selected_first():
    g = np.random.default_rng(4)
    n, p = 100, 10
    data = []
    for m in range(3):
        X = centered(g.standard_normal((n, p)))
        data.append(CompletedDataset(3 * X[:, 4] + g.standard_normal(n), X))
    fit = run_miboost(data, nu=0.1, t_stop=50)
    # brute force: aggregated rss of every single-covariate OLS fit on y - mean(y)
    L = [sum(fit_linear_learner(d.y - d.y.mean(), d.X[:, j]).rss for d in data) for j in range(p)]
    assert fit.selection_path[0] == int(np.argmin(L)) == 4


def test_m1_equals_cwgb():
    d = random_sets(M=1, seed=7)[0]
    a = run_miboost([d], nu=0.1, t_stop=80)
    b = run_cwgb(d, nu=0.1, t_stop=80)
    assert a.selection_path == b.selection_path
    np.testing.assert_allclose(a.coefficients, b.coefficients, rtol=0, atol=1e-12)


def test_cwgb_converges_to_ols_single_covariate():
    g = np.random.default_rng(5)
    x = centered(g.standard_normal((50, 1)))
    y = 0.7 * x[:, 0] + g.standard_normal(50)
    d = CompletedDataset(y, x)
    slope = (x[:, 0] @ (y - y.mean())) / (x[:, 0] @ x[:, 0])
    fit = run_cwgb(d, nu=1.0, t_stop=1)
    assert fit.coefficients[0, 1] == pytest.approx(slope, abs=1e-8)
    fit = run_cwgb(d, nu=0.1, t_stop=200, record_path=True)
    assert fit.coefficients[0, 1] == pytest.approx(slope, abs=1e-6)
    path = fit.averaged_path
    rss = [np.sum((y - fit.offsets[0] - c[0] - c[1] * x[:, 0]) ** 2) for c in path]
    assert np.all(np.diff(rss) <= 1e-12)


def test_cwgb_zero_step():
    d = random_sets(M=1)[0]
    fit = run_cwgb(d, nu=0.0, t_stop=25)
    assert np.all(fit.coefficients[:, 1:] == 0)


def test_cwgb_orthogonal_first_selection():
    x1 = np.array([1, -1, 1, -1, 1, -1, 1, -1], dtype=float)
    x2 = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=float)
    y = 2 * x1 + 1 * x2 + np.array([0.1, -0.2, 0.0, 0.3, -0.1, 0.2, 0.0, -0.3])
    d = CompletedDataset(y, np.column_stack([x1, x2]))
    u = y - y.mean()
    rss = [fit_linear_learner(u, d.X[:, j]).rss for j in range(2)]
    assert np.argmin(rss) == 0
    assert run_cwgb(d, t_stop=1).selection_path == [0]


def test_predict_examples():
    fit = BoostFit(np.array([[0.0, 2.0, 0.0, 0.0]]), np.array([5.0]), 0.1, [0])
    assert predict(fit, [1.5, 0.0, 0.0]) == pytest.approx(8.0)
    fit2 = BoostFit(np.array([[0.3, 1.0], [0.1, 2.0]]), np.array([1.0, 3.0]), 0.1, [0])
    assert predict(fit2, [0.0]) == pytest.approx(2.0 + 0.2)
    with pytest.raises(ValueError):
        predict(fit2, [1.0, 2.0])


def test_average_of_predictions_equals_prediction_of_average():
    data = random_sets(M=4, seed=8)
    fit = run_miboost(data, nu=0.1, t_stop=60)
    X = np.random.default_rng(0).standard_normal((20, fit.p))
    per_m = [fit.offsets[m] + fit.coefficients[m, 0] + X @ fit.coefficients[m, 1:] for m in range(fit.M)]
    np.testing.assert_allclose(np.mean(per_m, axis=0), predict_many(fit, X), atol=1e-10)


def test_uniform_selection_and_sparsity():
    data = random_sets(M=5, seed=9)
    fit = run_miboost(data, nu=0.1, t_stop=100)
    assert fit.uniform_violations == 0
    unused = set(range(fit.p)) - set(fit.selection_path)
    for j in unused:
        assert np.all(fit.coefficients[:, j + 1] == 0)
    np.testing.assert_allclose(fit.averaged, fit.coefficients.mean(axis=0), atol=1e-12)
    assert len(fit.selection_path) == fit.t_stop == 100


def test_per_imputation_increments_touch_only_selected_component():
    data = random_sets(M=3, seed=10)
    stack = _Stack(data)
    fit = run_miboost(data, t_stop=0)
    eta = np.repeat(fit.offsets[:, None], stack.X.shape[1], axis=1)
    for _ in range(30):
        before = fit.coefficients.copy()
        r = boost_step(fit, stack, eta)
        changed = np.flatnonzero(np.any(fit.coefficients[:, 1:] != before[:, 1:], axis=0))
        assert set(changed) <= {r}


def test_monotone_training_loss():
    data = random_sets(M=3, seed=11)
    loss = SquaredErrorLoss()
    stack = _Stack(data)
    fit = run_miboost(data, nu=0.3, t_stop=0)
    eta = np.repeat(fit.offsets[:, None], stack.X.shape[1], axis=1)
    prev = loss.evaluate(stack.Y, eta).sum()
    for _ in range(60):
        boost_step(fit, stack, eta)
        cur = loss.evaluate(stack.Y, eta).sum()
        assert cur <= prev + 1e-9
        prev = cur


@given(j=st.integers(0, 4), scale=st.floats(0.05, 20.0).map(lambda s: s if s else 1.0),
       sign=st.sampled_from([-1.0, 1.0]))
@settings(max_examples=25, deadline=None)
def test_selection_invariant_to_column_scaling(j, scale, sign):
    data = random_sets(M=2, seed=12)
    base = run_miboost(data, t_stop=40).selection_path
    scaled = []
    for d in data:
        X = d.X.copy()
        X[:, j] *= sign * scale
        scaled.append(CompletedDataset(d.y, X))
    assert run_miboost(scaled, t_stop=40).selection_path == base


def test_non_finite_gradient_raises():
    d = random_sets(M=1)[0]
    fit = run_miboost([d], t_stop=0)
    stack = _Stack([d])
    eta = np.full((1, d.n), np.nan)
    with pytest.raises(FloatingPointError):
        boost_step(fit, stack, eta)


def test_json_round_trip():
    fit = run_miboost(random_sets(M=2), t_stop=10)
    back = BoostFit.from_dict(json.loads(fit.to_json()))
    np.testing.assert_array_equal(back.coefficients, fit.coefficients)
    assert back.selection_path == fit.selection_path
