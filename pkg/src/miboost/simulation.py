"""Simulation study: data generation, MAR missingness, method comparison and metrics."""
from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .comparators import StackedCv, ea_boost, tune_stacked
from .crossval import CvConfig, center_each, final_imputation, miboost_cv, prepare_folds
from .data import MissingDataset, make_folds, rng, split_train_test
from .imputation import mice_apply

log = logging.getLogger(__name__)

METHODS = ("EA-Boosting", "MIBoost", "SaLASSO", "SaENET")
_ALIASES = {m.lower().replace("-", "").replace("_", ""): m for m in METHODS}


def canonical_method(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key == "ea" or key == "eaboost":
        key = "eaboosting"
    if key not in _ALIASES:
        raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return _ALIASES[key]


@dataclass
class SimConfig:
    n: int = 500
    p: int = 55
    q: int = 5
    rho: float = 0.25
    intercept: float = 5.0
    sigma: float = 4.0
    beta_range: tuple = (1.0, 3.0)
    gamma: tuple = (0.75, -0.5)
    target_missing: float = 0.30
    M: int = 10
    K: int = 5
    rounds: int = 100
    train_fraction: float = 0.8
    nu: float = 0.1
    t_stop_max: int = 1000
    cycles: int = 5
    donor_count: int = 5
    threshold: float = 0.1
    n_lambda: int = 200
    lambda_ratio: float = 1e-4
    n_alpha: int = 41
    seed: int = 20251016
    include_imputed_response: bool = True
    hide_test_response: bool = True
    average_test_predictions: bool = True

    def __post_init__(self):
        self.beta_range = tuple(float(b) for b in self.beta_range)
        self.gamma = tuple(float(g) for g in self.gamma)
        if not 1 <= self.q <= self.p:
            raise ValueError("need 1 <= q <= p")
        if self.p < 2:
            raise ValueError("need p >= 2 (X1 and X2 drive missingness)")
        if not 0.0 < self.target_missing < 1.0:
            raise ValueError("target_missing must lie in (0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    def cv_config(self, seed) -> CvConfig:
        return CvConfig(K=self.K, M=self.M, t_stop_max=self.t_stop_max, nu=self.nu,
                        cycles=self.cycles, donor_count=self.donor_count,
                        threshold=self.threshold, seed=seed,
                        include_imputed_response=self.include_imputed_response)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta_range"] = list(self.beta_range)
        d["gamma"] = list(self.gamma)
        return d


def symmetric_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def generate_complete(cfg: SimConfig, round_index: int):
    """Complete (X, y, beta) for one round."""
    g = rng("generate", cfg.seed, round_index)
    beta = np.zeros(cfg.p)
    beta[: cfg.q] = g.uniform(*cfg.beta_range, size=cfg.q)
    Sigma = np.full((cfg.q, cfg.q), cfg.rho)
    np.fill_diagonal(Sigma, 1.0)
    X_info = g.standard_normal((cfg.n, cfg.q)) @ symmetric_sqrt(Sigma)
    X_noise = g.standard_normal((cfg.n, cfg.p - cfg.q))
    X = np.hstack([X_info, X_noise])
    y = cfg.intercept + X @ beta + g.normal(0.0, cfg.sigma, size=cfg.n)
    return X, y, beta


def missing_intercept(lin: np.ndarray, target: float, tol: float = 1e-10) -> float:
    """Intercept a with mean(expit(a + lin)) == target, by bisection."""
    f = lambda a: float(np.mean(expit(a + lin))) - target  # noqa: E731
    lo, hi = -1.0, 1.0
    while f(lo) > 0:
        lo *= 2
        if lo < -1e6:
            raise ArithmeticError("bisection failed to bracket the missingness intercept")
    while f(hi) < 0:
        hi *= 2
        if hi > 1e6:
            raise ArithmeticError("bisection failed to bracket the missingness intercept")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) < tol or hi - lo < 1e-14:
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def induce_mar(X, y, gamma=(0.75, -0.5), target: float = 0.30, seed=0, names=None):
    """Mask every covariate except the first two, and the response, under MAR.

    P(missing) = expit(a + gamma1 * X1 + gamma2 * X2) independently per cell,
    with ``a`` chosen so the average probability equals ``target``.
    Returns (MissingDataset, a).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if p < 2:
        raise ValueError("need at least two covariates")
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    lin = gamma[0] * X[:, 0] + gamma[1] * X[:, 1]
    a = missing_intercept(lin, target)
    prob = expit(a + lin)
    g = rng("mar", seed)
    observed = g.random((n, p + 1)) >= prob[:, None]
    observed[:, :2] = True
    names = names or [f"X{j + 1}" for j in range(p)]
    d = MissingDataset(y, X, observed[:, p], observed[:, :p], tuple(names))
    return d, a


def generate_round(cfg: SimConfig, round_index: int):
    """(MissingDataset, true beta, informative index set) for one round."""
    X, y, beta = generate_complete(cfg, round_index)
    d, _ = induce_mar(X, y, cfg.gamma, cfg.target_missing, seed=(cfg.seed, round_index))
    return d, beta, np.arange(cfg.q)


def evaluate_on_test(model, test: MissingDataset, train_models, seed=0, hide_response=True,
                     average_predictions=True):
    """(raw MSPE, MSPE / var(observed test y)) on rows with an observed response.

    Test covariates are completed once per training imputation model; the
    model's stored centering means for that imputation are applied before
    predicting.
    """
    rows = np.flatnonzero(test.mask_y)
    if rows.size == 0:
        raise ValueError("test set has no observed responses")
    a, b = model.linear_form()
    centers = getattr(model, "centers", None)
    source = test.with_response_hidden() if hide_response else test
    preds = []
    for m, tm in enumerate(train_models):
        comp = mice_apply(tm, source, seed=seed)
        Xc = comp.X if centers is None else comp.X - centers[m]
        preds.append(a + Xc[rows] @ b)
    preds = np.array(preds)
    y = test.y[rows]
    if average_predictions:
        raw = float(np.mean((y - preds.mean(axis=0)) ** 2))
    else:
        raw = float(np.mean((y[None, :] - preds) ** 2))
    var = float(np.var(y, ddof=1)) if rows.size > 1 else np.nan
    return raw, raw / var


def selection_metrics(selected, informative, p: int):
    selected = set(int(j) for j in selected)
    informative = set(int(j) for j in informative)
    noise = set(range(p)) - informative
    tpp = len(selected & informative) / len(informative)
    tnp = len(noise - selected) / len(noise) if noise else 1.0
    return tpp, tnp, len(selected)


@dataclass
class RoundResult:
    round: int
    method: str
    mspe: float = np.nan
    mspe_norm: float = np.nan
    t_star: float = np.nan
    lam: float = np.nan
    alpha: float = np.nan
    tpp: float = np.nan
    tnp: float = np.nan
    n_selected: float = np.nan
    selected: list = field(default_factory=list)
    missing_fraction: float = np.nan
    uniform_violations: int = 0
    seconds: float = 0.0
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error


def run_round(cfg: SimConfig, round_index: int, methods=METHODS) -> list:
    """Generate, split, tune every method on the training part and score it on the test part."""
    methods = [canonical_method(m) for m in methods]
    d, beta, informative = generate_round(cfg, round_index)
    maskable = list(range(2, cfg.p)) + [cfg.p]
    miss = d.missing_fraction(maskable)
    seed = (cfg.seed, round_index)
    train, test = split_train_test(d, cfg.train_fraction, seed=seed)
    ccfg = cfg.cv_config(seed)

    t0 = time.perf_counter()
    final = final_imputation(train, ccfg)
    needs_folds = any(m != "EA-Boosting" for m in methods)
    prepared = None
    if needs_folds:
        folds = make_folds(train.n, cfg.K, seed)
        prepared = prepare_folds(train, folds, cfg.M, seed, cycles=cfg.cycles,
                                 donor_count=cfg.donor_count, threshold=cfg.threshold)
    shared_seconds = time.perf_counter() - t0

    results = []
    stacked, adaptive = None, None
    for method in methods:
        res = RoundResult(round_index, method, missing_fraction=miss)
        t0 = time.perf_counter()
        try:
            if method == "MIBoost":
                curve, model = miboost_cv(train, ccfg, prepared=prepared, final=final)
                res.t_star = curve.t_star
                res.uniform_violations = curve.uniform_violations
                selected = model.selected
            elif method == "EA-Boosting":
                data, centers = center_each(final.completed)
                model = ea_boost(data, nu=cfg.nu, K=cfg.K, t_stop_max=cfg.t_stop_max,
                                 seed=seed, centers=centers)
                res.t_star = model.t_star
                selected = model.selected
            else:
                if stacked is None:
                    stacked = StackedCv.from_folds(prepared, final.completed,
                                                   cfg.include_imputed_response,
                                                   n_lambda=cfg.n_lambda,
                                                   lambda_ratio=cfg.lambda_ratio)
                    adaptive = stacked.adaptive(np.linspace(0.0, 1.0, cfg.n_alpha))
                alphas = np.linspace(0.0, 1.0, cfg.n_alpha)
                gs = tune_stacked(method, stacked, alphas=alphas, adaptive=adaptive)
                model = gs.fit
                res.lam, res.alpha = gs.best_lambda, gs.best_alpha
                selected = model.selected
            res.mspe, res.mspe_norm = evaluate_on_test(
                model, test, final.models, seed=seed, hide_response=cfg.hide_test_response,
                average_predictions=cfg.average_test_predictions)
            res.tpp, res.tnp, res.n_selected = selection_metrics(selected, informative, cfg.p)
            res.selected = [int(j) for j in selected]
        except Exception as exc:  # recorded per round, the study continues
            res.error = f"{type(exc).__name__}: {exc}"
            log.warning("round %d %s failed: %s", round_index, method,
                        traceback.format_exc(limit=3))
        res.seconds = time.perf_counter() - t0 + shared_seconds / len(methods)
        results.append(res)
    return results


def _round_job(args):
    cfg, r, methods = args
    from threadpoolctl import threadpool_limits
    with threadpool_limits(1):
        return run_round(cfg, r, methods)


SUMMARY_METRICS = ("mspe", "mspe_norm", "t_star", "lam", "alpha", "tpp", "tnp", "n_selected")


@dataclass
class StudySummary:
    methods: list
    rows: dict                      # method -> {metric: (mean, se)} plus counts
    rounds: list                    # all RoundResults in (round, method) order

    @classmethod
    def from_rounds(cls, rounds, methods) -> "StudySummary":
        rows = {}
        for m in methods:
            rs = [r for r in rounds if r.method == m]
            ok = [r for r in rs if r.ok]
            row = {"rounds": len(ok), "failed": len(rs) - len(ok)}
            for key in SUMMARY_METRICS:
                v = np.array([getattr(r, key) for r in ok], dtype=float)
                v = v[np.isfinite(v)]
                mean = float(v.mean()) if v.size else np.nan
                se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else np.nan
                row[key] = (mean, se)
            row["uniform_violations"] = int(sum(r.uniform_violations for r in rs))
            rows[m] = row
        return cls(list(methods), rows, list(rounds))

    def mean(self, method: str, metric: str) -> float:
        return self.rows[canonical_method(method)][metric][0]

    def table(self, fmt: str = "text") -> str:
        head = ["method", "MSPE", "MSPE/var", "t_stop*", "lambda*", "alpha*", "TPP", "TNP",
                "#selected", "rounds", "failed"]
        body = []
        for m in self.methods:
            r = self.rows[m]
            cells = [m]
            for key, spec in (("mspe", ".3f"), ("mspe_norm", ".3f"), ("t_star", ".1f"),
                              ("lam", ".3g"), ("alpha", ".2f"), ("tpp", ".2f"), ("tnp", ".2f"),
                              ("n_selected", ".1f")):
                v = r[key][0]
                cells.append("" if not np.isfinite(v) else format(v, spec))
            cells += [str(r["rounds"]), str(r["failed"])]
            body.append(cells)
        if fmt == "csv":
            return "\n".join(",".join(row) for row in [head] + body) + "\n"
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in [head] + body]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, cfg: SimConfig | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["method", "rounds", "failed"]
            for key in SUMMARY_METRICS:
                header += [key, f"{key}_se"]
            header.append("uniform_violations")
            w.writerow(header)
            for m in self.methods:
                r = self.rows[m]
                row = [m, r["rounds"], r["failed"]]
                for key in SUMMARY_METRICS:
                    row += [_num(r[key][0]), _num(r[key][1])]
                row.append(r["uniform_violations"])
                w.writerow(row)
        with (out / "rounds.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "method", *SUMMARY_METRICS, "missing_fraction",
                        "uniform_violations", "selected", "seconds", "error"])
            for r in self.rounds:
                w.writerow([r.round, r.method, *[_num(getattr(r, k)) for k in SUMMARY_METRICS],
                            _num(r.missing_fraction), r.uniform_violations,
                            " ".join(str(j) for j in r.selected), f"{r.seconds:.3f}", r.error])
        if cfg is not None:
            (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n",
                                              encoding="utf-8")


def _num(v) -> str:
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


def run_study(cfg: SimConfig, methods=METHODS, threads: int = 1, progress=None) -> StudySummary:
    """All rounds for the requested methods; rounds may run in worker processes.

    Results are gathered in round order, so the summary does not depend on
    the worker count.
    """
    methods = [canonical_method(m) for m in methods]
    methods = [m for m in METHODS if m in methods]
    jobs = [(cfg, r, methods) for r in range(cfg.rounds)]
    rounds = []
    if threads <= 1:
        for job in jobs:
            rounds.extend(_round_job(job))
            if progress:
                progress(job[1])
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for job, res in zip(jobs, pool.map(_round_job, jobs)):
                rounds.extend(res)
                if progress:
                    progress(job[1])
    return StudySummary.from_rounds(rounds, methods)
