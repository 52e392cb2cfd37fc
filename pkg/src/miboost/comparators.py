"""Baselines: estimate-averaging boosting and stacked adaptive LASSO / elastic net.

The penalized fits minimise, over an unpenalized intercept b0 and beta,

    1/2 * sum_i w_i (y_i - b0 - x_i beta)^2
        + lam * sum_j a_j * (alpha * |beta_j| + (1 - alpha) / 2 * beta_j^2)

on M imputations stacked row-wise with observation weights w_i = 1/M. The
intercept is profiled out, so coordinate descent runs on the weighted Gram
matrix of the centered design.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .boosting import SquaredErrorLoss, run_cwgb
from .crossval import center_each, path_errors
from .data import CompletedDataset, make_folds

ALPHA_FLOOR = 1e-3  # ridge end of the alpha grid: lambda_max computed at this alpha


@dataclass(eq=False)
class EAFit:
    """Per-imputation boosting fits averaged into one linear model."""

    coefficients: np.ndarray
    offsets: np.ndarray
    t_stars: np.ndarray
    selected: np.ndarray
    nu: float
    centers: np.ndarray | None = None

    @property
    def averaged(self) -> np.ndarray:
        return self.coefficients.mean(axis=0)

    @property
    def t_star(self) -> float:
        return float(np.mean(self.t_stars))

    def linear_form(self):
        avg = self.averaged
        return float(self.offsets.mean() + avg[0]), avg[1:].copy()

    def to_dict(self) -> dict:
        return {
            "method": "ea_boost",
            "nu": self.nu,
            "t_stars": self.t_stars.tolist(),
            "offsets": self.offsets.tolist(),
            "coefficients": self.coefficients.tolist(),
            "averaged": self.averaged.tolist(),
            "selected": self.selected.tolist(),
        }


def cwgb_cv_curve(data: CompletedDataset, folds, nu: float, t_stop_max: int, loss=None) -> np.ndarray:
    """K-fold validation MSE per iteration for boosting on one completed dataset."""
    per_fold = []
    for k in range(1, folds.K + 1):
        tr, va = folds.complement(k), folds.indices(k)
        mu = data.X[tr].mean(axis=0)
        train = CompletedDataset(data.y[tr], data.X[tr] - mu)
        val = CompletedDataset(data.y[va], data.X[va] - mu)
        fit = run_cwgb(train, nu=nu, t_stop=t_stop_max, loss=loss, record_path=True)
        path = fit.averaged_path
        per_fold.append(path_errors(fit.offsets[0] + path[:, 0], path[:, 1:], [val]))
    return np.mean(per_fold, axis=0)


def ea_boost(data, nu: float = 0.1, K: int = 5, t_stop_max: int = 1000, seed=0, loss=None,
             centers=None) -> EAFit:
    """Boost each completed (centered) dataset with its own CV-chosen stopping
    iteration and average the M coefficient vectors.

    A covariate counts as selected when any imputation selected it.
    """
    loss = loss or SquaredErrorLoss()
    data = list(data)
    folds = make_folds(data[0].n, K, seed)
    coefs, offs, t_stars, selected = [], [], [], set()
    for d in data:
        curve = cwgb_cv_curve(d, folds, nu, t_stop_max, loss)
        t = int(np.argmin(curve))
        fit = run_cwgb(d, nu=nu, t_stop=t, loss=loss)
        coefs.append(fit.coefficients[0])
        offs.append(fit.offsets[0])
        t_stars.append(t)
        selected.update(int(r) for r in fit.selection_path)
    return EAFit(np.array(coefs), np.array(offs), np.array(t_stars),
                 np.array(sorted(selected), dtype=int), float(nu), centers)


@dataclass(eq=False)
class StackedDesign:
    """M imputations stacked m-major with per-row observation weights."""

    X: np.ndarray
    y: np.ndarray
    obs_weight: np.ndarray
    origin: np.ndarray              # (imputation m, original row i) per stacked row
    _gram: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_imputations(cls, datasets, weights=None) -> "StackedDesign":
        datasets = list(datasets)
        M, n = len(datasets), datasets[0].n
        X = np.vstack([d.X for d in datasets])
        y = np.concatenate([d.y for d in datasets])
        w = np.full(M * n, 1.0 / M) if weights is None else np.asarray(weights, dtype=float)
        origin = np.column_stack([np.repeat(np.arange(M), n), np.tile(np.arange(n), M)])
        return cls(X, y, w, origin)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def gram(self):
        """(G, c, x_mean, y_mean): weighted Gram matrix and cross-products of the centered design."""
        if self._gram is None:
            w = self.obs_weight
            sw = w.sum()
            xm = (w @ self.X) / sw
            ym = float(w @ self.y) / sw
            Xc = self.X - xm
            Xw = Xc * w[:, None]
            G = Xw.T @ Xc
            c = Xw.T @ (self.y - ym)
            self._gram = (G, c, xm, ym)
        return self._gram

    def objective(self, intercept, beta, lam, alpha, w_adapt=None) -> float:
        w_adapt = np.ones(self.p) if w_adapt is None else np.asarray(w_adapt, dtype=float)
        r = self.y - intercept - self.X @ beta
        return float(0.5 * self.obs_weight @ (r * r) + penalty(beta, lam, alpha, w_adapt))


def penalty(beta, lam, alpha, w_adapt) -> float:
    beta = np.asarray(beta, dtype=float)
    on = beta != 0
    a = np.asarray(w_adapt, dtype=float)[on]
    b = beta[on]
    return float(lam * np.sum(a * (alpha * np.abs(b) + 0.5 * (1 - alpha) * b * b)))


@dataclass(eq=False)
class PenalizedFit:
    intercept: float
    coefficients: np.ndarray
    lam: float
    alpha: float
    adaptive_weights: np.ndarray
    converged: bool
    iterations: int
    centers: np.ndarray | None = None

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients != 0)

    def linear_form(self):
        return float(self.intercept), self.coefficients.copy()

    def to_dict(self) -> dict:
        aw = [None if not np.isfinite(a) else float(a) for a in self.adaptive_weights]
        return {
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "lambda": self.lam,
            "alpha": self.alpha,
            "adaptive_weights": aw,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@njit(cache=True)
def _sweep(G, g, beta, l1, l2, excluded, active_only):
    dmax = 0.0
    p = beta.shape[0]
    for j in range(p):
        if excluded[j] or (active_only and beta[j] == 0.0):
            continue
        old = beta[j]
        z = g[j] + G[j, j] * old
        den = G[j, j] + l2[j]
        if den <= 0.0:
            new = 0.0
        elif z > l1[j]:
            new = (z - l1[j]) / den
        elif z < -l1[j]:
            new = (z + l1[j]) / den
        else:
            new = 0.0
        if new != old:
            d = new - old
            for i in range(p):
                g[i] -= G[i, j] * d
            beta[j] = new
            if abs(d) > dmax:
                dmax = abs(d)
    return dmax


@njit(cache=True)
def _cd(G, c, beta, l1, l2, excluded, tol, max_iter):
    """Cyclic coordinate descent with active-set passes; beta is updated in place."""
    g = c - G @ beta
    it = 0
    while it < max_iter:
        it += 1
        if _sweep(G, g, beta, l1, l2, excluded, False) < tol:
            return it, True
        while it < max_iter:
            it += 1
            if _sweep(G, g, beta, l1, l2, excluded, True) < tol:
                break
    return it, False


@njit(cache=True)
def _path(G, c, a, alpha, lambdas, tol, max_iter):
    p = c.shape[0]
    L = lambdas.shape[0]
    betas = np.zeros((L, p))
    iters = np.zeros(L, dtype=np.int64)
    conv = np.zeros(L, dtype=np.bool_)
    excluded = np.isinf(a)
    a_fin = np.where(excluded, 0.0, a)
    beta = np.zeros(p)
    for k in range(L):
        l1 = lambdas[k] * alpha * a_fin
        l2 = lambdas[k] * (1.0 - alpha) * a_fin
        it, ok = _cd(G, c, beta, l1, l2, excluded, tol, max_iter)
        betas[k] = beta
        iters[k] = it
        conv[k] = ok
    return betas, iters, conv


def _adapt(design, w_adapt):
    if w_adapt is None:
        return np.ones(design.p)
    a = np.asarray(w_adapt, dtype=float)
    if a.shape != (design.p,) or np.any(a < 0) or np.any(np.isnan(a)):
        raise ValueError("adaptive weights must be a non-negative p-vector")
    return a


def enet_path(design: StackedDesign, lambdas, alpha: float, w_adapt=None, tol: float = 1e-9,
              max_iter: int = 100_000):
    """Warm-started solutions along ``lambdas`` (taken in the given order).

    Returns (intercepts, betas, iterations, converged).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    lambdas = np.asarray(lambdas, dtype=float)
    if np.any(lambdas < 0):
        raise ValueError("lambda must be >= 0")
    a = _adapt(design, w_adapt)
    G, c, xm, ym = design.gram()
    betas, iters, conv = _path(G, c, a, float(alpha), lambdas, float(tol), int(max_iter))
    intercepts = ym - betas @ xm
    return intercepts, betas, iters, conv


def coord_descent_enet(design: StackedDesign, lam: float, alpha: float, w_adapt=None,
                       tol: float = 1e-9, max_iter: int = 100_000) -> PenalizedFit:
    """Weighted adaptive elastic net at one (lambda, alpha) by coordinate descent.

    Coefficients with an infinite adaptive weight are held at exactly zero.
    Non-convergence within ``max_iter`` sweeps is reported in the result.
    """
    a = _adapt(design, w_adapt)
    b0, betas, iters, conv = enet_path(design, [lam], alpha, a, tol, max_iter)
    return PenalizedFit(float(b0[0]), betas[0].copy(), float(lam), float(alpha), a,
                        bool(conv[0]), int(iters[0]))


def kkt_violation(design: StackedDesign, fit: PenalizedFit) -> float:
    """Largest violation of the stationarity / subgradient conditions."""
    G, c, xm, ym = design.gram()
    beta = fit.coefficients
    grad = c - G @ beta
    worst = abs((ym - xm @ beta) - fit.intercept)
    for j in range(design.p):
        a = fit.adaptive_weights[j]
        if np.isinf(a):
            if beta[j] != 0:
                return np.inf
            continue
        l1 = fit.lam * fit.alpha * a
        l2 = fit.lam * (1 - fit.alpha) * a
        if beta[j] != 0:
            v = abs(grad[j] - l2 * beta[j] - l1 * np.sign(beta[j]))
        else:
            v = max(abs(grad[j]) - l1, 0.0)
        worst = max(worst, v)
    return float(worst)


def lambda_max(design: StackedDesign, alpha: float, w_adapt=None) -> float:
    """Smallest lambda at which every coefficient is zero (alpha floored at ALPHA_FLOOR)."""
    a = _adapt(design, w_adapt)
    _, c, _, _ = design.gram()
    ok = np.isfinite(a) & (a > 0)
    if not ok.any():
        return 1.0
    return float(np.max(np.abs(c[ok]) / a[ok]) / max(alpha, ALPHA_FLOOR))


def lambda_grid(lmax: float, n: int = 200, ratio: float = 1e-4) -> np.ndarray:
    if lmax <= 0:
        lmax = 1.0
    return np.geomspace(lmax, lmax * ratio, n)


def adaptive_weights(beta, gamma: float = 1.0) -> np.ndarray:
    """1/|beta|^gamma, with +inf for zero coefficients (permanent exclusion)."""
    beta = np.abs(np.asarray(beta, dtype=float))
    out = np.full(beta.shape, np.inf)
    nz = beta > 0
    out[nz] = 1.0 / beta[nz] ** gamma
    return out


def adaptive_weights_from_senet(design: StackedDesign, lam: float, alpha: float,
                                gamma: float = 1.0) -> np.ndarray:
    """Adaptive weights from a preliminary equal-weight stacked elastic net at (lam, alpha)."""
    fit = coord_descent_enet(design, lam, alpha)
    if not np.any(fit.coefficients != 0):
        raise ValueError("preliminary elastic net set every coefficient to zero; "
                         "the lambda grid over-shrinks")
    return adaptive_weights(fit.coefficients, gamma)


@dataclass(eq=False)
class GridSearchResult:
    cv_error: np.ndarray            # n_lambda x n_alpha
    lambdas: np.ndarray             # n_lambda x n_alpha (grid depends on alpha)
    alphas: np.ndarray
    best_lambda: float
    best_alpha: float
    fit: PenalizedFit

    @property
    def best_index(self) -> tuple[int, int]:
        i, j = np.argwhere((self.lambdas == self.best_lambda) & (self.alphas[None, :] == self.best_alpha))[0]
        return int(i), int(j)


def _pick(cv_error, lambdas, alphas):
    """Minimum CV error; ties go to the larger lambda, then the smaller alpha."""
    best = np.min(cv_error)
    cand = np.argwhere(cv_error == best)
    i, j = min(cand, key=lambda ij: (-lambdas[ij[0], ij[1]], alphas[ij[1]]))
    return int(i), int(j)


@dataclass(eq=False)
class StackedCv:
    """Fold-wise stacked designs sharing one set of split-before-impute imputations."""

    fold_designs: list
    fold_vals: list
    fold_rows: list
    full_design: StackedDesign
    centers: np.ndarray
    n_lambda: int = 200
    lambda_ratio: float = 1e-4

    @classmethod
    def from_folds(cls, prepared, final_completed, include_imputed_response=True, **grid):
        designs = [StackedDesign.from_imputations(f.train) for f in prepared]
        vals = [f.val for f in prepared]
        rows = [None if include_imputed_response else np.flatnonzero(f.val_observed) for f in prepared]
        full, centers = center_each(final_completed)
        return cls(designs, vals, rows, StackedDesign.from_imputations(full), centers, **grid)

    def grid_search(self, alphas, a_full=None, a_folds=None, tol=1e-9) -> GridSearchResult:
        alphas = np.asarray(alphas, dtype=float)
        p = self.full_design.p
        a_full = np.ones(p) if a_full is None else a_full
        a_folds = [np.ones(p)] * len(self.fold_designs) if a_folds is None else a_folds
        L = self.n_lambda
        cv = np.zeros((L, len(alphas)))
        lams = np.zeros((L, len(alphas)))
        for j, alpha in enumerate(alphas):
            lam = lambda_grid(lambda_max(self.full_design, alpha, a_full), L, self.lambda_ratio)
            lams[:, j] = lam
            errs = []
            for design, vals, rows, a in zip(self.fold_designs, self.fold_vals, self.fold_rows, a_folds):
                b0, betas, _, _ = enet_path(design, lam, alpha, a, tol)
                errs.append(path_errors(b0, betas, vals, rows))
            cv[:, j] = np.mean(errs, axis=0)
        i, j = _pick(cv, lams, alphas)
        fit = coord_descent_enet(self.full_design, lams[i, j], alphas[j], a_full, tol)
        fit.centers = self.centers
        return GridSearchResult(cv, lams, alphas, float(lams[i, j]), float(alphas[j]), fit)

    def adaptive(self, prelim_alphas, gamma: float = 1.0):
        """Tune the equal-weight preliminary elastic net by CV, then derive
        adaptive weights for the full data and for every fold's training part."""
        pre = self.grid_search(prelim_alphas)
        if not np.any(pre.fit.coefficients != 0):
            raise ValueError("preliminary elastic net set every coefficient to zero")
        a_full = adaptive_weights(pre.fit.coefficients, gamma)
        a_folds = [adaptive_weights(coord_descent_enet(d, pre.best_lambda, pre.best_alpha).coefficients, gamma)
                   for d in self.fold_designs]
        return pre, a_full, a_folds


ALPHA_GRID = np.linspace(0.0, 1.0, 41)


def tune_stacked(method: str, cv: StackedCv, alphas=ALPHA_GRID, prelim_alphas=ALPHA_GRID,
                 adaptive=None, gamma: float = 1.0) -> GridSearchResult:
    """CV grid search for SaLASSO (alpha fixed at 1) or SaENET (alpha searched).

    ``adaptive`` may carry a precomputed (prelim, a_full, a_folds) triple so
    both methods can share one preliminary fit.
    """
    method = method.lower()
    if method == "salasso":
        alphas = np.array([1.0])
    elif method != "saenet":
        raise ValueError(f"unknown method {method!r}")
    if adaptive is None:
        adaptive = cv.adaptive(prelim_alphas, gamma)
    _, a_full, a_folds = adaptive
    return cv.grid_search(alphas, a_full, a_folds)
