import numpy as np
import pytest
from scipy.special import logit
from scipy.stats import spearmanr

from miboost.data import MissingDataset, split_train_test
from miboost.imputation import mice_fit
from miboost.simulation import (METHODS, RoundResult, SimConfig, StudySummary, canonical_method,
                                evaluate_on_test, generate_complete, generate_round, induce_mar,
                                missing_intercept, run_study, selection_metrics)


class LinearModel:
    def __init__(self, a, b):
        self.a, self.b = a, np.asarray(b, dtype=float)

    def linear_form(self):
        return self.a, self.b


def test_informative_correlation():
    cfg = SimConfig(n=10_000, rho=0.25)
    X, _, _ = generate_complete(cfg, 0)
    C = np.corrcoef(X[:, :cfg.q], rowvar=False)
    off = C[~np.eye(cfg.q, dtype=bool)]
    assert np.all(np.abs(off - 0.25) < 0.02)
    assert np.all(np.abs(np.corrcoef(X[:, cfg.q:cfg.q + 5], rowvar=False)[0, 1:]) < 0.05)


def test_independence_when_rho_zero():
    cfg = SimConfig(n=2000, rho=0.0)
    offs = []
    for r in range(5):
        X, _, _ = generate_complete(cfg, r)
        C = np.cov(X[:, :cfg.q], rowvar=False)
        offs.append(C[~np.eye(cfg.q, dtype=bool)])
    assert np.all(np.abs(np.mean(offs, axis=0)) < 3 / np.sqrt(cfg.n))


def test_response_variance_closed_form():
    cfg = SimConfig(n=200_000)
    X, y, beta = generate_complete(cfg, 3)
    Sigma = np.eye(cfg.p)
    Sigma[:cfg.q, :cfg.q] = cfg.rho
    np.fill_diagonal(Sigma, 1.0)
    expected = beta @ Sigma @ beta + cfg.sigma ** 2
    assert np.var(y) == pytest.approx(expected, rel=0.02)
    assert np.all(beta[cfg.q:] == 0) and np.all((beta[:cfg.q] >= 1) & (beta[:cfg.q] <= 3))


def test_missing_intercept_zero_slopes():
    assert missing_intercept(np.zeros(100), 0.3) == pytest.approx(logit(0.3), abs=1e-3)
    assert logit(0.3) == pytest.approx(-0.8473, abs=1e-4)


@pytest.mark.parametrize("r", range(5))
def test_realized_missing_fraction_and_fixed_columns(r):
    cfg = SimConfig()
    d, _, _ = generate_round(cfg, r)
    assert d.mask_X[:, :2].all()
    frac = d.missing_fraction(list(range(2, cfg.p)) + [cfg.p])
    assert 0.27 < frac < 0.33


def test_missingness_increases_with_x1():
    cfg = SimConfig()
    d, _, _ = generate_round(cfg, 0)
    counts = (~d.mask_X).sum(axis=1) + (~d.mask_y)
    res = spearmanr(d.X[:, 0], counts)
    assert res.statistic > 0 and res.pvalue < 0.01
    res2 = spearmanr(d.X[:, 1], counts)
    assert res2.statistic < 0


def test_induce_mar_validation():
    with pytest.raises(ValueError):
        induce_mar(np.zeros((5, 1)), np.zeros(5))
    with pytest.raises(ValueError):
        induce_mar(np.zeros((5, 3)), np.zeros(5), target=1.2)


def test_oracle_model_noiseless_is_exact():
    cfg = SimConfig(sigma=0.0, n=200)
    X, y, beta = generate_complete(cfg, 1)
    d = MissingDataset.from_arrays(y, X)
    train, test = split_train_test(d, 0.8, seed=0)
    models = mice_fit(train, M=2, seed=0, extra_targets=[cfg.p]).models
    raw, _ = evaluate_on_test(LinearModel(cfg.intercept, beta), test, models)
    assert raw == pytest.approx(0.0, abs=1e-20)


def test_null_model_normalized_near_one():
    cfg = SimConfig(n=2000)
    X, y, _ = generate_complete(cfg, 2)
    d = MissingDataset.from_arrays(y, X)
    train, test = split_train_test(d, 0.5, seed=0)
    models = mice_fit(train, M=1, seed=0, extra_targets=[cfg.p]).models
    _, norm = evaluate_on_test(LinearModel(train.y.mean(), np.zeros(cfg.p)), test, models)
    assert norm == pytest.approx(1.0, abs=0.05)


def test_oracle_model_hits_noise_floor():
    cfg = SimConfig()
    raws = []
    for r in range(40):
        X, y, beta = generate_complete(cfg, r)
        d = MissingDataset.from_arrays(y, X)
        _, test = split_train_test(d, cfg.train_fraction, seed=r)
        raws.append(np.mean((test.y - cfg.intercept - test.X @ beta) ** 2))
    assert np.mean(raws) == pytest.approx(cfg.sigma ** 2, rel=0.15)


@pytest.mark.parametrize("selected,tpp,tnp,count", [
    ([0, 1, 2, 3, 4], 1.0, 1.0, 5),
    ([0, 1, 7], 0.4, 0.98, 3),
    (list(range(55)), 1.0, 0.0, 55),
])
def test_selection_metrics_consistency(selected, tpp, tnp, count):
    got = selection_metrics(selected, range(5), 55)
    assert got == pytest.approx((tpp, tnp, count))
    assert got[2] == pytest.approx(5 * got[0] + 50 * (1 - got[1]))


def test_method_names():
    assert canonical_method("miboost") == "MIBoost"
    assert canonical_method("ea") == "EA-Boosting"
    assert canonical_method("SaENET") == "SaENET"
    with pytest.raises(ValueError):
        canonical_method("xgboost")


def test_summary_aggregates_and_skips_failures():
    rows = [RoundResult(0, "MIBoost", mspe=1.0, tpp=1.0), RoundResult(1, "MIBoost", mspe=3.0, tpp=0.8),
            RoundResult(2, "MIBoost", error="boom")]
    s = StudySummary.from_rounds(rows, ["MIBoost"])
    assert s.mean("MIBoost", "mspe") == pytest.approx(2.0)
    assert s.mean("MIBoost", "tpp") == pytest.approx(0.9)


def _tiny(**kw):
    base = dict(n=120, p=10, q=3, M=2, K=3, rounds=1, t_stop_max=60, cycles=2,
                n_lambda=20, n_alpha=3, seed=11)
    base.update(kw)
    return SimConfig(**base)


def test_single_round_single_method_summary(tmp_path):
    s = run_study(_tiny(), methods=["MIBoost"])
    assert len(s.rounds) == 1
    r = s.rounds[0]
    assert r.ok and r.method == "MIBoost"
    for metric in ("mspe", "tpp", "tnp", "n_selected", "t_star"):
        assert s.mean("MIBoost", metric) == pytest.approx(getattr(r, metric))
    assert r.n_selected == pytest.approx(3 * r.tpp + 7 * (1 - r.tnp))
    s.write(tmp_path, _tiny())
    assert {p.name for p in tmp_path.iterdir()} >= {"summary.csv", "rounds.csv", "config.json"}


def test_all_methods_one_round():
    s = run_study(_tiny(), methods=METHODS)
    assert [r.method for r in s.rounds] == list(METHODS)
    assert all(r.ok for r in s.rounds), [r.error for r in s.rounds]
    for r in s.rounds:
        assert r.n_selected == pytest.approx(3 * r.tpp + 7 * (1 - r.tnp))
        assert r.uniform_violations == 0
