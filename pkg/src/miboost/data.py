"""Dataset containers, splitting, folds and covariate centering."""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data (CSV parsing, shape mismatches)."""


def rng(purpose: str, *keys: int) -> np.random.Generator:
    """Independent generator keyed by a purpose label and integer keys.

    Streams for different purposes never overlap, so adding a new consumer
    does not shift any existing stream.
    """
    flat = as_keys(keys)
    if any(k < 0 for k in flat):
        raise ValueError("RNG keys must be non-negative")
    # key count is included: SeedSequence treats trailing zeros as absent
    entropy = [zlib.crc32(purpose.encode("utf-8")), len(flat), *flat]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_keys(seed) -> tuple[int, ...]:
    """Flatten an int or (nested) tuple of ints into a key tuple."""
    if isinstance(seed, (tuple, list)):
        out: tuple[int, ...] = ()
        for s in seed:
            out += as_keys(s)
        return out
    return (int(seed),)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MissingDataset:
    """Response plus covariates with observation masks (True = observed).

    Masked cells are overwritten with NaN on construction, so whatever value
    the caller stored there can never leak into a computation.
    """

    y: np.ndarray
    X: np.ndarray
    mask_y: np.ndarray
    mask_X: np.ndarray
    names: tuple[str, ...]
    response_name: str = "y"

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError("X must be two-dimensional")
        n, p = X.shape
        if n < 1 or p < 1:
            raise DataError("need n >= 1 and p >= 1")
        mask_y = np.array(self.mask_y, dtype=bool).reshape(-1)
        mask_X = np.array(self.mask_X, dtype=bool)
        if y.shape != (n,) or mask_y.shape != (n,) or mask_X.shape != (n, p):
            raise DataError("mask/data dimensions do not match")
        names = tuple(str(s) for s in self.names)
        if len(names) != p:
            raise DataError(f"expected {p} covariate names, got {len(names)}")
        y[~mask_y] = np.nan
        X[~mask_X] = np.nan
        if not np.all(np.isfinite(y[mask_y])) or not np.all(np.isfinite(X[mask_X])):
            raise DataError("observed cells must be finite")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "mask_y", _frozen(mask_y))
        object.__setattr__(self, "mask_X", _frozen(mask_X))
        object.__setattr__(self, "names", names)

    @classmethod
    def from_arrays(cls, y, X, names=None, response_name="y") -> "MissingDataset":
        """Build from arrays where NaN marks a missing cell."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if names is None:
            names = [f"X{j + 1}" for j in range(X.shape[1])]
        return cls(y, X, ~np.isnan(y), ~np.isnan(X), tuple(names), response_name)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def is_complete(self) -> bool:
        return bool(self.mask_y.all() and self.mask_X.all())

    def variables(self) -> tuple[np.ndarray, np.ndarray]:
        """Covariates and response as one n x (p+1) matrix (response last) and its mask."""
        Z = np.column_stack([self.X, self.y])
        R = np.column_stack([self.mask_X, self.mask_y])
        return Z, R

    def subset(self, rows) -> "MissingDataset":
        rows = np.asarray(rows)
        return MissingDataset(
            self.y[rows], self.X[rows], self.mask_y[rows], self.mask_X[rows],
            self.names, self.response_name,
        )

    def with_response_hidden(self) -> "MissingDataset":
        """Copy with every response value masked."""
        return MissingDataset(
            self.y, self.X, np.zeros(self.n, dtype=bool), self.mask_X,
            self.names, self.response_name,
        )

    def missing_fraction(self, columns=None) -> float:
        _, R = self.variables()
        if columns is not None:
            R = R[:, columns]
        return float(1.0 - R.mean())


@dataclass(frozen=True, eq=False)
class CompletedDataset:
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim != 2 or y.shape[0] != X.shape[0]:
            raise DataError("y and X row counts differ")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataError("completed dataset contains missing or non-finite values")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True, eq=False)
class CenteringInfo:
    means: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=float).reshape(-1)
        if not np.all(np.isfinite(means)):
            raise DataError("centering means must be finite")
        object.__setattr__(self, "means", _frozen(means))

    def negate(self) -> "CenteringInfo":
        return CenteringInfo(-self.means)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray = field(repr=False)
    K: int

    def indices(self, k: int) -> np.ndarray:
        """Row indices of fold k (1-based)."""
        return np.flatnonzero(self.fold_of == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K + 1)[1:]


def center_fit(d: CompletedDataset) -> CenteringInfo:
    return CenteringInfo(d.X.mean(axis=0))


def center_apply(d: CompletedDataset, c: CenteringInfo) -> CompletedDataset:
    if c.means.shape[0] != d.p:
        raise DataError(f"centering has {c.means.shape[0]} columns, data has {d.p}")
    return CompletedDataset(d.y, d.X - c.means)


def split_train_test(d: MissingDataset, train_fraction: float, seed: int):
    """Random row split into (train, test); train gets floor(fraction * n) rows."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(np.floor(train_fraction * d.n))
    if n_train < 1 or d.n - n_train < 1:
        raise ValueError(f"degenerate split of n={d.n} at fraction {train_fraction}")
    perm = rng("split", seed).permutation(d.n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return d.subset(train_idx), d.subset(test_idx)


def make_folds(n: int, K: int, seed: int) -> FoldAssignment:
    if K < 2 or K > n:
        raise ValueError(f"need 2 <= K <= n, got K={K}, n={n}")
    perm = rng("folds", seed, n, K).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % K + 1
    fold_of.setflags(write=False)
    return FoldAssignment(fold_of, K)


def load_csv(path, response_column: str, missing_token: str = "NA") -> MissingDataset:
    """Read a numeric CSV with a header row.

    Cells equal to ``missing_token`` or empty are treated as missing. Row
    numbers in error messages are file line numbers (the header is line 1).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"{path}: duplicate column labels {dupes}")
    if response_column not in header:
        raise DataError(f"{path}: response column {response_column!r} not found")
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    n, ncol = len(rows) - 1, len(header)
    values = np.zeros((n, ncol))
    observed = np.ones((n, ncol), dtype=bool)
    for i, row in enumerate(rows[1:]):
        if len(row) != ncol:
            raise DataError(f"{path}: row {i + 2} has {len(row)} cells, expected {ncol}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell == missing_token:
                observed[i, j] = False
                continue
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {cell!r} at row {i + 2}, column {header[j]!r}"
                ) from None
            if not np.isfinite(v):
                raise DataError(f"{path}: non-finite value at row {i + 2}, column {header[j]!r}")
            values[i, j] = v
    r = header.index(response_column)
    cov = [j for j in range(ncol) if j != r]
    if not cov:
        raise DataError(f"{path}: no covariate columns")
    return MissingDataset(
        values[:, r], values[:, cov], observed[:, r], observed[:, cov],
        tuple(header[j] for j in cov), response_column,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(path, d, names: Sequence[str] | None = None, response_name: str | None = None,
              missing_token: str = "NA") -> None:
    """Write a MissingDataset or CompletedDataset; response first, covariates in order."""
    if isinstance(d, MissingDataset):
        names = d.names if names is None else names
        response_name = response_name or d.response_name
        y, X, my, mX = d.y, d.X, d.mask_y, d.mask_X
    else:
        if names is None:
            names = [f"X{j + 1}" for j in range(d.p)]
        response_name = response_name or "y"
        y, X = d.y, d.X
        my, mX = np.ones(d.n, dtype=bool), np.ones(X.shape, dtype=bool)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([response_name, *names])
        for i in range(len(y)):
            cells = [_fmt(y[i]) if my[i] else missing_token]
            cells += [_fmt(X[i, j]) if mX[i, j] else missing_token for j in range(X.shape[1])]
            w.writerow(cells)
