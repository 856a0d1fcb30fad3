"""Datasets and the least-squares M-estimation loss."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "DataError",
    "Dataset",
    "LossEvaluation",
    "LeastSquares",
    "LEAST_SQUARES",
    "loss_eval",
    "score_covariance",
    "fit_unconstrained",
    "r_squared",
    "read_csv_dataset",
]


class DataError(ValueError):
    """Input data violates a dataset invariant."""


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    column_names: tuple[str, ...]
    has_intercept: bool = True

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"incompatible shapes y{y.shape}, X{X.shape}")
        n, p = X.shape
        if len(self.column_names) != p:
            raise DataError(f"{len(self.column_names)} column names for {p} columns")
        if n <= p:
            raise DataError(f"need n > p, got n={n}, p={p}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("non-finite values in data")
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] <= 1e-10 * sv[0]:
            raise DataError("design matrix is rank deficient")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_outcome(self, y: np.ndarray) -> "Dataset":
        """Same design, new outcome; skips the rank check already done for ``X``."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape or not np.all(np.isfinite(y)):
            raise DataError("replacement outcome has wrong shape or non-finite values")
        new = object.__new__(Dataset)
        object.__setattr__(new, "y", y)
        object.__setattr__(new, "X", self.X)
        object.__setattr__(new, "column_names", self.column_names)
        object.__setattr__(new, "has_intercept", self.has_intercept)
        return new

    @classmethod
    def from_arrays(cls, y, X, column_names: Sequence[str] | None = None, add_intercept: bool = False):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        names = list(column_names) if column_names is not None else [f"x{j}" for j in range(X.shape[1])]
        if add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
            names = ["const"] + names
        return cls(np.asarray(y, dtype=float), X, tuple(names), add_intercept)


@dataclass(frozen=True)
class LossEvaluation:
    value: float
    grad: np.ndarray
    hess: np.ndarray
    score_rows: np.ndarray


class LeastSquares:
    """``phi_n(theta) = ||y - X theta||^2 / (2n)``.

    Other losses plug in by providing the same four methods; the solver
    only assumes a twice-differentiable convex loss.
    """

    name = "least_squares"
    quadratic = True

    def value(self, data: Dataset, theta: np.ndarray) -> float:
        r = data.y - data.X @ theta
        return float(r @ r) / (2 * data.n)

    def grad(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        return -data.X.T @ (data.y - data.X @ theta) / data.n

    def hess(self, data: Dataset, theta: np.ndarray | None = None) -> np.ndarray:
        return data.X.T @ data.X / data.n

    def scores(self, data: Dataset, theta: np.ndarray) -> np.ndarray:
        resid = data.y - data.X @ theta
        return -data.X * resid[:, None]


LEAST_SQUARES = LeastSquares()


def _check_theta(data: Dataset, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.p,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({data.p},)")
    return theta


def loss_eval(data: Dataset, theta, loss=LEAST_SQUARES) -> LossEvaluation:
    theta = _check_theta(data, theta)
    return LossEvaluation(
        value=loss.value(data, theta),
        grad=loss.grad(data, theta),
        hess=loss.hess(data, theta),
        score_rows=loss.scores(data, theta),
    )


def score_covariance(data: Dataset, theta, loss=LEAST_SQUARES) -> np.ndarray:
    """Centered plug-in ``(1/n) sum (psi_i - psi_bar)(psi_i - psi_bar)'``."""
    theta = _check_theta(data, theta)
    psi = loss.scores(data, theta)
    mean = psi.mean(axis=0)
    cov = psi.T @ psi / data.n - np.outer(mean, mean)
    return 0.5 * (cov + cov.T)


def fit_unconstrained(data: Dataset) -> np.ndarray:
    """Least-squares fit from the normal equations (Cholesky of ``X'X``)."""
    XtX = data.X.T @ data.X
    try:
        factor = linalg.cho_factor(XtX)
    except linalg.LinAlgError as exc:
        raise DataError("normal equations are singular") from exc
    theta = linalg.cho_solve(factor, data.X.T @ data.y)
    # one step of iterative refinement keeps the gradient at round-off level
    theta += linalg.cho_solve(factor, data.X.T @ (data.y - data.X @ theta))
    return theta


def r_squared(data: Dataset, theta) -> float:
    resid = data.y - data.X @ np.asarray(theta, dtype=float)
    centered = data.y - data.y.mean()
    return 1.0 - float(resid @ resid) / float(centered @ centered)


def read_csv_dataset(
    path: str | Path,
    outcome: str,
    regressors: Sequence[str] | None = None,
    add_intercept: bool = True,
) -> Dataset:
    """Load a header-row CSV; ``regressors`` defaults to every other numeric column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or outcome not in reader.fieldnames:
            raise DataError(f"{path}: outcome column {outcome!r} not found")
        rows = list(reader)
    names = list(regressors) if regressors is not None else [c for c in reader.fieldnames if c != outcome]
    missing = [c for c in names if c not in reader.fieldnames]
    if missing:
        raise DataError(f"{path}: columns not found: {missing}")
    try:
        y = np.array([float(r[outcome]) for r in rows])
        X = np.array([[float(r[c]) for c in names] for r in rows]).reshape(len(rows), len(names))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    return Dataset.from_arrays(y, X, names, add_intercept=add_intercept)
