"""Cross-validated choice of the MIBoost stopping iteration.

Folds are split before imputation. The training part of each fold is
imputed M times, its fitted imputation models complete the validation part,
and both parts are centered with the training means of the matching
imputation. Nothing computed from validation rows feeds back into the
training side.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boosting import SquaredErrorLoss, predict_many, run_miboost
from .data import (CenteringInfo, FoldAssignment, MissingDataset, center_apply, center_fit,
                   make_folds)
from .imputation import ImputationSet, mice_apply, mice_fit


@dataclass
class CvConfig:
    K: int = 5
    M: int = 10
    t_stop_max: int = 1000
    nu: float = 0.1
    cycles: int = 5
    donor_count: int = 5
    threshold: float = 0.1
    seed: int = 0
    include_imputed_response: bool = True
    loss: object = field(default_factory=SquaredErrorLoss, repr=False, compare=False)

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.t_stop_max < 1:
            raise ValueError("t_stop_max must be >= 1")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError("nu must lie in (0, 1]")

    def echo(self) -> dict:
        out = asdict(self)
        out["loss"] = getattr(self.loss, "name", type(self.loss).__name__)
        return out


@dataclass
class CvCurve:
    errors: np.ndarray
    per_fold: np.ndarray
    t_star: int
    uniform_violations: int = 0

    @classmethod
    def from_folds(cls, per_fold, violations=0) -> "CvCurve":
        per_fold = np.asarray(per_fold, dtype=float)
        errors = per_fold.mean(axis=0)
        return cls(errors, per_fold, int(np.argmin(errors)), violations)

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "t", "error"])
            for k, row in enumerate(self.per_fold, start=1):
                for t, e in enumerate(row):
                    w.writerow([k, t, repr(float(e))])

    def summary(self) -> dict:
        return {"t_star": self.t_star, "min_error": float(self.errors[self.t_star])}


@dataclass(eq=False)
class FoldData:
    """Imputed and centered training/validation material for one fold."""

    k: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    models: tuple
    centers: np.ndarray                 # M x p training means
    train: list
    val: list
    val_observed: np.ndarray            # response observed in validation rows


def imputation_params(cfg) -> dict:
    return dict(cycles=cfg.cycles, donor_count=cfg.donor_count, threshold=cfg.threshold)


def center_each(datasets, centers=None):
    """Center every dataset by its own means, or by the given M x p means."""
    out, means = [], []
    for m, d in enumerate(datasets):
        c = center_fit(d) if centers is None else CenteringInfo(centers[m])
        out.append(center_apply(d, c))
        means.append(c.means)
    return out, np.array(means)


def prepare_fold(d: MissingDataset, folds: FoldAssignment, k: int, M: int, seed,
                 cycles=5, donor_count=5, threshold=0.1) -> FoldData:
    train_idx, val_idx = folds.complement(k), folds.indices(k)
    train, val = d.subset(train_idx), d.subset(val_idx)
    _, R_val = val.variables()
    extra = [v for v in range(R_val.shape[1]) if not R_val[:, v].all()]
    imp = mice_fit(train, M=M, cycles=cycles, donor_count=donor_count, threshold=threshold,
                   seed=(seed, k), extra_targets=extra)
    val_done = [mice_apply(model, val, seed=(seed, k, 1)) for model in imp.models]
    train_c, centers = center_each(imp.completed)
    val_c, _ = center_each(val_done, centers)
    return FoldData(k, train_idx, val_idx, imp.models, centers, train_c, val_c, val.mask_y.copy())


def prepare_folds(d: MissingDataset, folds: FoldAssignment, M: int, seed, **imp) -> list:
    return [prepare_fold(d, folds, k, M, seed, **imp) for k in range(1, folds.K + 1)]


def path_errors(intercepts: np.ndarray, slopes: np.ndarray, val_sets, rows=None) -> np.ndarray:
    """Validation MSE, averaged over imputations, for a batch of linear models.

    ``intercepts`` has shape (L,), ``slopes`` (L, p). Returns shape (L,).
    """
    total = np.zeros(len(intercepts))
    for v in val_sets:
        X, y = (v.X, v.y) if rows is None else (v.X[rows], v.y[rows])
        if len(y) == 0:
            raise ValueError("empty validation set")
        resid = y[:, None] - (X @ slopes.T + intercepts[None, :])
        total += np.mean(resid * resid, axis=0)
    return total / len(val_sets)


def validation_error(fit, val_sets, rows=None) -> float:
    """Mean over imputations of the averaged model's MSE on each validation set."""
    errs = []
    for v in val_sets:
        X, y = (v.X, v.y) if rows is None else (v.X[rows], v.y[rows])
        if len(y) == 0:
            raise ValueError("empty validation set")
        r = y - predict_many(fit, X)
        errs.append(np.mean(r * r))
    return float(np.mean(errs))


def _error_rows(fold: FoldData, cfg: CvConfig):
    if cfg.include_imputed_response:
        return None
    rows = np.flatnonzero(fold.val_observed)
    if rows.size == 0:
        raise ValueError(f"fold {fold.k}: no observed responses in validation part")
    return rows


def cv_fold(fold: FoldData, cfg: CvConfig):
    """Run MIBoost on one prepared fold; returns (fit, error per iteration)."""
    if not fold.val_observed.any():
        raise ValueError(f"fold {fold.k}: validation part has no observed responses")
    fit = run_miboost(fold.train, nu=cfg.nu, t_stop=cfg.t_stop_max, loss=cfg.loss,
                      record_path=True, centers=fold.centers)
    path = fit.averaged_path
    intercepts = fit.offsets.mean() + path[:, 0]
    errors = path_errors(intercepts, path[:, 1:], fold.val, _error_rows(fold, cfg))
    return fit, errors


def final_imputation(d: MissingDataset, cfg) -> ImputationSet:
    """Impute the full data; every variable gets a stored model for later reuse."""
    return mice_fit(d, M=cfg.M, seed=(cfg.seed, 0), extra_targets=range(d.p + 1),
                    **imputation_params(cfg))


def miboost_cv(d: MissingDataset, cfg: CvConfig, folds: FoldAssignment | None = None,
               prepared=None, final: ImputationSet | None = None):
    """K-fold selection of the stopping iteration followed by the final MIBoost fit.

    ``prepared`` (from :func:`prepare_folds`) and ``final`` (from
    :func:`final_imputation`) can be passed in to share imputations with
    other methods tuned on the same split.
    """
    if prepared is None:
        folds = folds or make_folds(d.n, cfg.K, cfg.seed)
        prepared = prepare_folds(d, folds, cfg.M, cfg.seed, **imputation_params(cfg))
    per_fold, violations = [], 0
    for fold in prepared:
        fit, errors = cv_fold(fold, cfg)
        per_fold.append(errors)
        violations += fit.uniform_violations
    curve = CvCurve.from_folds(per_fold, violations)
    if final is None:
        final = final_imputation(d, cfg)
    data, centers = center_each(final.completed)
    fit = run_miboost(data, nu=cfg.nu, t_stop=curve.t_star, loss=cfg.loss, centers=centers)
    curve.uniform_violations += fit.uniform_violations
    return curve, fit


def write_cv_report(curve: CvCurve, cfg: CvConfig, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curve.write_csv(out / "cv_curve.csv")
    summary = {**curve.summary(), "config": cfg.echo(), **(extra or {})}
    (out / "cv_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")

