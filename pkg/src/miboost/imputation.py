"""Multiple imputation by chained equations with predictive mean matching.

Variables are indexed 0..p-1 for covariates and p for the response. Each
fitted :class:`ImputationModel` keeps its regressions and training donor
pools, so it can complete new rows (validation or test data) without being
refit on them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import rankdata

from .data import CompletedDataset, DataError, MissingDataset, rng, write_csv


def spearman(a, b) -> float:
    """Rank correlation over pairwise-observed (non-NaN) entries.

    Ties get mid-ranks. Returns 0.0 when either vector is constant on the
    common support.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("spearman: vectors differ in length")
    ok = ~(np.isnan(a) | np.isnan(b))
    if ok.sum() < 2:
        raise ValueError("spearman: fewer than 2 pairwise-observed entries")
    ra = rankdata(a[ok])
    rb = rankdata(b[ok])
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra @ ra) * (rb @ rb))
    if den == 0.0:
        return 0.0
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def _abs_spearman_matrix(Z: np.ndarray) -> np.ndarray:
    q = Z.shape[1]
    S = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1, q):
            try:
                s = abs(spearman(Z[:, i], Z[:, j]))
            except ValueError:
                s = 0.0
            S[i, j] = S[j, i] = s
    return S


def _screen(S: np.ndarray, target: int, threshold: float) -> tuple[int, ...]:
    cand = [j for j in range(S.shape[0]) if j != target]
    chosen = [j for j in cand if S[target, j] >= threshold]
    if not chosen:
        # ties resolved toward the smallest index
        chosen = [cand[int(np.argmax(S[target, cand]))]]
    return tuple(chosen)


def screen_predictors(d: MissingDataset, target: int, threshold: float) -> tuple[int, ...]:
    """Variables whose |Spearman| with ``target`` reaches ``threshold``.

    Falls back to the single strongest variable when nothing passes.
    """
    Z, _ = d.variables()
    if not 0 <= target < Z.shape[1]:
        raise IndexError(f"target {target} out of range")
    S = np.zeros((Z.shape[1], Z.shape[1]))
    for j in range(Z.shape[1]):
        if j != target:
            try:
                S[target, j] = abs(spearman(Z[:, target], Z[:, j]))
            except ValueError:
                S[target, j] = 0.0
    return _screen(S, target, threshold)


@dataclass(frozen=True, eq=False)
class VariableModel:
    """Regression and donor pool for one imputed variable.

    ``coef`` is the least-squares fit used to score donors; ``coef_draw`` is
    the parameter draw used to score rows being imputed (type-1 matching).
    """

    target: int
    predictors: tuple[int, ...]
    coef: np.ndarray
    coef_draw: np.ndarray
    donor_values: np.ndarray
    donor_rows: np.ndarray
    donor_predictions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "predictors": list(self.predictors),
            "coef": self.coef.tolist(),
            "coef_draw": self.coef_draw.tolist(),
            "donor_values": self.donor_values.tolist(),
            "donor_rows": self.donor_rows.tolist(),
            "donor_predictions": self.donor_predictions.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ImputationModel:
    records: dict
    visit_order: tuple[int, ...]
    cycles: int
    donor_count: int
    n_vars: int
    index: int = 0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "n_vars": self.n_vars,
            "cycles": self.cycles,
            "donor_count": self.donor_count,
            "visit_order": list(self.visit_order),
            "records": [self.records[v].to_dict() for v in self.visit_order],
        }


@dataclass(frozen=True, eq=False)
class ImputationSet:
    completed: tuple
    models: tuple
    source: MissingDataset

    def __post_init__(self):
        if len(self.completed) != len(self.models) or not self.completed:
            raise ValueError("completed datasets and models must be non-empty and equal in number")

    @property
    def M(self) -> int:
        return len(self.completed)


def _design(Zc, rows, predictors):
    # rows: boolean row mask
    sub = Zc[rows][:, list(predictors)]
    return np.column_stack([np.ones(sub.shape[0]), sub])


def _fit_variable(Zc, observed, target, predictors, gen) -> VariableModel:
    A = _design(Zc, observed, predictors)
    t = Zc[observed, target]
    G = A.T @ A
    G[np.diag_indices_from(G)] += 1e-8 * np.mean(np.diag(G))
    cf = cho_factor(G, lower=True)
    coef = cho_solve(cf, A.T @ t)
    resid = t - A @ coef
    df = max(len(t) - A.shape[1], 1)
    sigma = np.sqrt((resid @ resid) / gen.chisquare(df))
    z = gen.standard_normal(A.shape[1])
    # L^{-T} z has covariance (A'A)^{-1}
    coef_draw = coef + sigma * solve_triangular(cf[0], z, lower=True, trans="T")
    return VariableModel(
        target=int(target),
        predictors=tuple(int(j) for j in predictors),
        coef=coef,
        coef_draw=coef_draw,
        donor_values=t.copy(),
        donor_rows=A[:, 1:].copy(),
        donor_predictions=A @ coef,
    )


def _pmm(rec: VariableModel, A_mis: np.ndarray, donor_count: int, gen) -> np.ndarray:
    pred = A_mis @ rec.coef_draw
    order = np.argsort(rec.donor_predictions, kind="stable")
    sp = rec.donor_predictions[order]
    N = len(sp)
    k = min(donor_count, N)
    width = min(2 * k, N)
    # the k nearest donors are contiguous in sorted order, inside this window
    start = np.clip(np.searchsorted(sp, pred) - k, 0, N - width)
    window = start[:, None] + np.arange(width)
    dist = np.abs(sp[window] - pred[:, None])
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    rows = np.arange(len(pred))
    pick = nearest[rows, gen.integers(0, k, size=len(pred))]
    return rec.donor_values[order[window[rows, pick]]]


def _visit_order(R: np.ndarray) -> list[int]:
    n_missing = (~R).sum(axis=0)
    response = R.shape[1] - 1
    cov = [j for j in range(response) if n_missing[j] > 0]
    cov.sort(key=lambda j: (-n_missing[j], j))
    if n_missing[response] > 0:
        cov.append(response)
    return cov


def _impute_one(Z, R, order, extra, screened, m, cycles, donor_count, seed):
    Zc = Z.copy()
    for v in order:
        miss = ~R[:, v]
        obs_vals = Z[R[:, v], v]
        Zc[miss, v] = rng("mice-init", seed, m, v).choice(obs_vals, size=int(miss.sum()))
    records = {}
    for c in range(cycles):
        for v in order:
            miss = ~R[:, v]
            rec = _fit_variable(Zc, R[:, v], v, screened[v], rng("mice-draw", seed, m, c, v))
            A_mis = _design(Zc, miss, rec.predictors)
            Zc[miss, v] = _pmm(rec, A_mis, donor_count, rng("mice-donor", seed, m, c, v))
            records[v] = rec
    for v in extra:
        records[v] = _fit_variable(Zc, R[:, v], v, screened[v], rng("mice-draw", seed, m, cycles, v))
    model = ImputationModel(records, tuple(order) + tuple(extra), cycles, donor_count, Z.shape[1], m)
    return Zc, model


def mice_fit(d: MissingDataset, M: int = 10, cycles: int = 5, donor_count: int = 5,
             threshold: float = 0.1, seed: int = 0, extra_targets=()) -> ImputationSet:
    """Impute ``d`` M times.

    Each imputation m uses its own RNG streams keyed by (seed, m). Predictor
    sets come from |Spearman| screening on the incomplete data. Variables in
    ``extra_targets`` that are fully observed still get a stored model (fit
    on the final completion), so that :func:`mice_apply` can impute them in
    other data.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if cycles < 1 or donor_count < 1:
        raise ValueError("cycles and donor_count must be >= 1")
    Z, R = d.variables()
    names = list(d.names) + [d.response_name]
    order = _visit_order(R)
    extra = [int(v) for v in extra_targets if int(v) not in order]
    need = max(2, donor_count)
    for v in order + extra:
        if R[:, v].sum() < need:
            raise DataError(
                f"variable {names[v]!r} has {int(R[:, v].sum())} observed values; need at least {need}"
            )
    if not order and not extra:
        comp = CompletedDataset(d.y, d.X)
        models = tuple(ImputationModel({}, (), cycles, donor_count, Z.shape[1], m) for m in range(M))
        return ImputationSet(tuple(comp for _ in range(M)), models, d)
    S = _abs_spearman_matrix(Z)
    screened = {v: _screen(S, v, threshold) for v in order + extra}
    completed, models = [], []
    for m in range(M):
        Zc, model = _impute_one(Z, R, order, extra, screened, m, cycles, donor_count, seed)
        completed.append(CompletedDataset(Zc[:, -1], Zc[:, :-1]))
        models.append(model)
    return ImputationSet(tuple(completed), tuple(models), d)


def mice_apply(model: ImputationModel, d: MissingDataset, seed: int = 0) -> CompletedDataset:
    """Complete ``d`` with a stored model: one pass, no refitting.

    Missing cells are initialised from the training donor values and then
    matched against the training donor pool in the model's visit order.
    """
    Z, R = d.variables()
    if Z.shape[1] != model.n_vars:
        raise DataError(f"schema mismatch: model has {model.n_vars} variables, data has {Z.shape[1]}")
    missing_vars = [v for v in range(Z.shape[1]) if not R[:, v].all()]
    if not missing_vars:
        return CompletedDataset(d.y, d.X)
    unknown = [v for v in missing_vars if v not in model.records]
    if unknown:
        names = list(d.names) + [d.response_name]
        raise DataError(f"no imputation model for variables {[names[v] for v in unknown]}")
    Zc = Z.copy()
    m = model.index
    for v in model.visit_order:
        miss = ~R[:, v]
        if miss.any():
            pool = model.records[v].donor_values
            Zc[miss, v] = rng("mice-init", seed, m, v).choice(pool, size=int(miss.sum()))
    for v in model.visit_order:
        miss = ~R[:, v]
        if not miss.any():
            continue
        rec = model.records[v]
        A_mis = _design(Zc, miss, rec.predictors)
        Zc[miss, v] = _pmm(rec, A_mis, model.donor_count, rng("mice-donor", seed, m, 0, v))
    return CompletedDataset(Zc[:, -1], Zc[:, :-1])


def dump_imputation_set(imp: ImputationSet, out_dir) -> list[Path]:
    """Write M completed CSVs and a JSON manifest of the fitted models."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = imp.source
    width = len(str(imp.M))
    paths = []
    for m, comp in enumerate(imp.completed, start=1):
        path = out / f"imputation_{m:0{width}d}.csv"
        write_csv(path, comp, names=src.names, response_name=src.response_name)
        paths.append(path)
    manifest = {
        "M": imp.M,
        "variables": list(src.names) + [src.response_name],
        "models": [mdl.to_dict() for mdl in imp.models],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    paths.append(path)
    return paths
