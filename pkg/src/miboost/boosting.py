"""Component-wise L2 boosting with linear base-learners, single and multi-imputation.

Coefficients are stored accumulated: column 0 holds the summed intercept
contributions, column j+1 the summed slope for covariate j (0-based). For
linear learners this reproduces the additive predictor exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import CompletedDataset

VAR_EPS = 1e-12


class SquaredErrorLoss:
    """rho(y, eta) = (y - eta)^2 / 2."""

    name = "squared_error"

    def evaluate(self, y, eta):
        r = np.asarray(y, dtype=float) - np.asarray(eta, dtype=float)
        return 0.5 * r * r

    def negative_gradient(self, y, eta):
        return np.asarray(y, dtype=float) - np.asarray(eta, dtype=float)

    def offset(self, y) -> float:
        return float(np.mean(y))


@dataclass(frozen=True)
class LinearBaseLearnerFit:
    component: int
    intercept: float
    slope: float
    rss: float


def fit_linear_learner(u, x, component: int = 0) -> LinearBaseLearnerFit:
    """OLS of ``u`` on an intercept and ``x``; slope 0 if ``x`` is (near) constant."""
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    if u.shape != x.shape or u.ndim != 1 or len(u) < 2:
        raise ValueError("u and x must be vectors of equal length >= 2")
    xc = x - x.mean()
    uc = u - u.mean()
    sxx = xc @ xc
    slope = (xc @ uc) / sxx if sxx / len(x) >= VAR_EPS else 0.0
    intercept = u.mean() - slope * x.mean()
    r = u - intercept - slope * x
    return LinearBaseLearnerFit(int(component), float(intercept), float(slope), float(r @ r))


def select_component_miboost(rss) -> int:
    """Joint selection: argmin over components of the rss summed over imputations.

    ``rss`` is an M x p array (or a grid of LinearBaseLearnerFit). Ties go to
    the smallest component index.
    """
    grid = np.asarray(
        [[f.rss if isinstance(f, LinearBaseLearnerFit) else f for f in row] for row in rss],
        dtype=float,
    )
    return int(np.argmin(grid.sum(axis=0)))


@dataclass(eq=False)
class BoostFit:
    coefficients: np.ndarray          # M x (p+1)
    offsets: np.ndarray               # M
    nu: float
    selection_path: list = field(default_factory=list)
    averaged_path: np.ndarray | None = None   # (t+1) x (p+1), averaged coefficients per iteration
    centers: np.ndarray | None = None          # M x p training means used for centering
    uniform_violations: int = 0

    @property
    def M(self) -> int:
        return self.coefficients.shape[0]

    @property
    def p(self) -> int:
        return self.coefficients.shape[1] - 1

    @property
    def t_stop(self) -> int:
        return len(self.selection_path)

    @property
    def averaged(self) -> np.ndarray:
        return self.coefficients.mean(axis=0)

    @property
    def selected(self) -> np.ndarray:
        return np.unique(np.asarray(self.selection_path, dtype=int))

    def linear_form(self):
        """(intercept, slopes) of the averaged predictor on centered covariates."""
        avg = self.averaged
        return float(self.offsets.mean() + avg[0]), avg[1:].copy()

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "nu": self.nu,
            "t_stop": self.t_stop,
            "offsets": self.offsets.tolist(),
            "coefficients": self.coefficients.tolist(),
            "averaged": self.averaged.tolist(),
            "selection_path": [int(r) for r in self.selection_path],
            "centers": None if self.centers is None else self.centers.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BoostFit":
        centers = d.get("centers")
        return cls(
            coefficients=np.asarray(d["coefficients"], dtype=float),
            offsets=np.asarray(d["offsets"], dtype=float),
            nu=float(d["nu"]),
            selection_path=[int(r) for r in d["selection_path"]],
            centers=None if centers is None else np.asarray(centers, dtype=float),
        )


def predict(fit: BoostFit, x_row) -> float:
    """Averaged-model prediction for one centered covariate row."""
    x = np.asarray(x_row, dtype=float)
    if x.shape != (fit.p,):
        raise ValueError(f"expected {fit.p} covariates, got {x.shape}")
    a, b = fit.linear_form()
    return a + float(b @ x)


def predict_many(fit: BoostFit, X) -> np.ndarray:
    a, b = fit.linear_form()
    return a + np.asarray(X, dtype=float) @ b


class _Stack:
    """Per-imputation arrays and precomputed learner statistics."""

    def __init__(self, datasets):
        datasets = [datasets] if isinstance(datasets, CompletedDataset) else list(datasets)
        if not datasets:
            raise ValueError("need at least one dataset")
        self.X = np.stack([d.X for d in datasets])     # M x n x p
        self.Y = np.stack([d.y for d in datasets])     # M x n
        M, n, p = self.X.shape
        if n < 2:
            raise ValueError("need at least 2 observations")
        self.xbar = self.X.mean(axis=1)                 # M x p
        self.Xc = self.X - self.xbar[:, None, :]
        self.sxx = np.einsum("mnp,mnp->mp", self.Xc, self.Xc)
        self.usable = self.sxx / n >= VAR_EPS


def boost_step(state: BoostFit, stack: _Stack, eta: np.ndarray, loss=None) -> int:
    """One MIBoost iteration, updating ``state`` and ``eta`` (M x n) in place.

    Returns the jointly selected component.
    """
    loss = loss or SquaredErrorLoss()
    U = loss.negative_gradient(stack.Y, eta)
    if not np.all(np.isfinite(U)):
        raise FloatingPointError("non-finite negative gradient")
    ubar = U.mean(axis=1)
    Uc = U - ubar[:, None]
    suu = np.einsum("mn,mn->m", Uc, Uc)
    sxu = np.einsum("mnp,mn->mp", stack.Xc, Uc)
    slope = np.where(stack.usable, sxu / np.where(stack.usable, stack.sxx, 1.0), 0.0)
    rss = suu[:, None] - slope * sxu
    r = int(np.argmin(rss.sum(axis=0)))
    b = slope[:, r]
    a = ubar - b * stack.xbar[:, r]
    before = state.coefficients.copy()
    state.coefficients[:, 0] += state.nu * a
    state.coefficients[:, r + 1] += state.nu * b
    eta += state.nu * (a[:, None] + b[:, None] * stack.X[:, :, r])
    changed = np.flatnonzero(np.any(state.coefficients[:, 1:] != before[:, 1:], axis=0))
    if changed.size and not (changed.size == 1 and changed[0] == r):
        state.uniform_violations += 1
    state.selection_path.append(r)
    return r


def run_miboost(data, nu: float = 0.1, t_stop: int = 100, loss=None, offsets: str = "mean",
                record_path: bool = False, centers=None) -> BoostFit:
    """MIBoost on M completed (centered) datasets.

    Every iteration fits all p linear learners in every imputation, picks the
    component with the smallest rss summed over imputations and updates that
    component in all imputations.
    """
    if t_stop < 0:
        raise ValueError("t_stop must be >= 0")
    loss = loss or SquaredErrorLoss()
    stack = _Stack(data)
    M, n, p = stack.X.shape
    if offsets == "mean":
        off = np.array([loss.offset(y) for y in stack.Y])
    elif offsets == "zero":
        off = np.zeros(M)
    else:
        raise ValueError(f"unknown offset policy {offsets!r}")
    state = BoostFit(np.zeros((M, p + 1)), off, float(nu), centers=centers)
    eta = np.repeat(off[:, None], n, axis=1)
    path = np.zeros((t_stop + 1, p + 1)) if record_path else None
    for t in range(1, t_stop + 1):
        boost_step(state, stack, eta, loss)
        if record_path:
            path[t] = state.coefficients.mean(axis=0)
    state.averaged_path = path
    return state


def run_cwgb(data: CompletedDataset, nu: float = 0.1, t_stop: int = 100, loss=None,
             record_path: bool = False) -> BoostFit:
    """Plain component-wise boosting on one completed (centered) dataset."""
    if t_stop < 0:
        raise ValueError("t_stop must be >= 0")
    loss = loss or SquaredErrorLoss()
    X, y = data.X, data.y
    n, p = X.shape
    xbar = X.mean(axis=0)
    Xc = X - xbar
    sxx = (Xc * Xc).sum(axis=0)
    usable = sxx / n >= VAR_EPS
    safe_sxx = np.where(usable, sxx, 1.0)
    off = loss.offset(y)
    coef = np.zeros(p + 1)
    eta = np.full(n, off)
    path_sel = []
    path = np.zeros((t_stop + 1, p + 1)) if record_path else None
    for t in range(1, t_stop + 1):
        u = loss.negative_gradient(y, eta)
        ubar = u.mean()
        uc = u - ubar
        sxu = uc @ Xc
        slope = np.where(usable, sxu / safe_sxx, 0.0)
        rss = uc @ uc - slope * sxu
        r = int(np.argmin(rss))
        a = ubar - slope[r] * xbar[r]
        coef[0] += nu * a
        coef[r + 1] += nu * slope[r]
        eta += nu * (a + slope[r] * X[:, r])
        path_sel.append(r)
        if record_path:
            path[t] = coef
    return BoostFit(coef[None, :].copy(), np.array([off]), float(nu), path_sel, path)


def truncate(fit: BoostFit, t: int) -> BoostFit:
    """Averaged model after t iterations (needs a recorded path); per-imputation detail dropped."""
    if fit.averaged_path is None:
        raise ValueError("fit has no recorded path")
    coef = fit.averaged_path[t][None, :]
    return replace(fit, coefficients=coef.copy(), offsets=np.array([fit.offsets.mean()]),
                   selection_path=list(fit.selection_path[:t]), averaged_path=None)
