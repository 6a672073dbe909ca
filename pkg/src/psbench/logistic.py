"""L1-regularized logistic regression on sparse binary designs.

This is the propensity-score fitting engine: cyclic coordinate descent on
internally standardized columns, coefficients reported back on the raw 0/1
scale, and 10-fold cross-validation to let the data pick the regularization
strength.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._kernels import solve_logistic_cd
from .cohort import Cohort
from .errors import DegenerateLabelsError, NumericalError

CONVERGENCE_TOL = 1e-7
MAX_SWEEPS = 10_000
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class FittedModel:
    """Sparse logistic model: unpenalized intercept + penalized coefficients."""

    intercept: float
    coefficients: dict        # covariate_id -> raw-scale coefficient, nonzero only
    lam: float
    n_nonzero: int
    objective: float          # penalized mean negative log-likelihood at solution

    def __post_init__(self):
        if not np.isfinite(self.objective):
            raise NumericalError("non-finite objective in fitted model")
        if self.n_nonzero != sum(1 for v in self.coefficients.values() if v != 0.0):
            raise NumericalError("n_nonzero inconsistent with coefficient map")

    def to_json(self) -> str:
        return json.dumps(
            {
                "intercept": self.intercept,
                "lambda": self.lam,
                "coefficients": {str(k): v for k, v in self.coefficients.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FittedModel":
        d = json.loads(text)
        coefs = {int(k): float(v) for k, v in d["coefficients"].items() if float(v) != 0.0}
        return cls(
            intercept=float(d["intercept"]),
            coefficients=coefs,
            lam=float(d["lambda"]),
            n_nonzero=len(coefs),
            objective=0.0,
        )


def _ids_of(covariate_set) -> np.ndarray:
    ids = getattr(covariate_set, "ids", covariate_set)
    return np.asarray(list(ids), dtype=np.int64)


def dense_design(cohort: Cohort, covariate_ids, rows=None) -> np.ndarray:
    """Dense float design matrix for the given covariate ids (optionally row-subset)."""
    ids = _ids_of(covariate_ids)
    if len(ids) == 0:
        n = cohort.n_subjects if rows is None else len(rows)
        return np.zeros((n, 0))
    cols = cohort.columns_of(ids)
    X = cohort.covariates[:, cols]
    if rows is not None:
        X = X[rows]
    return np.asarray(X.todense(), dtype=np.float64)


def standardize(X: np.ndarray):
    """Center/scale columns by mean and population SD; constant columns zeroed out."""
    mean = X.mean(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    sd = X.std(axis=0)
    active = sd > 0
    Xs = np.zeros_like(X)
    if active.any():
        Xs[:, active] = (X[:, active] - mean[active]) / sd[active]
    return np.asfortranarray(Xs), mean, sd, active


def _check_labels(y: np.ndarray):
    if not (np.any(y == 1) and np.any(y == 0)):
        raise DegenerateLabelsError("labels contain a single class")


def _lambda_max_dense(X: np.ndarray, y: np.ndarray) -> float:
    """max_j |(1/n) sum_i x~_ij (y_i - ybar)| over standardized columns."""
    if X.shape[1] == 0:
        return 0.0
    Xs, _, _, active = standardize(X)
    if not active.any():
        return 0.0
    score = Xs.T @ (y - y.mean()) / len(y)
    return float(np.max(np.abs(score)))


def lambda_max(cohort: Cohort, covariate_set, labels) -> float:
    """Smallest L1 strength at which the penalized solution is all-zero."""
    y = np.asarray(labels, dtype=np.float64)
    _check_labels(y)
    return _lambda_max_dense(dense_design(cohort, covariate_set), y)


def _fit_std(Xs, y, lam, beta=None, b0=None, tol=CONVERGENCE_TOL, max_sweeps=MAX_SWEEPS):
    """Run the CD kernel on a pre-standardized design; returns std-scale solution."""
    n, m = Xs.shape
    if beta is None:
        beta = np.zeros(m)
    if b0 is None:
        ybar = y.mean()
        ybar = min(max(ybar, PROB_CLAMP), 1 - PROB_CLAMP)
        b0 = float(np.log(ybar / (1 - ybar)))
    pen = np.ones(m)
    beta, b0, obj, sweeps, _ = solve_logistic_cd(
        Xs, y, lam, pen, beta.copy(), float(b0), tol, max_sweeps
    )
    if not np.isfinite(obj):
        raise NumericalError("non-finite objective during logistic fit")
    return beta, b0, obj


def fit_logistic_l1(cohort: Cohort, covariate_set, labels, lam: float) -> FittedModel:
    """Fit an L1-penalized logistic model of `labels` on the given covariates.

    Columns are standardized internally; reported coefficients are on the
    original 0/1 scale and the intercept is unpenalized.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    y = np.asarray(labels, dtype=np.float64)
    _check_labels(y)
    ids = _ids_of(covariate_set)
    X = dense_design(cohort, ids)
    Xs, mean, sd, active = standardize(X)
    beta_std, b0_std, obj = _fit_std(Xs, y, lam)
    return _to_raw_model(ids, beta_std, b0_std, mean, sd, active, lam, obj)


def _to_raw_model(ids, beta_std, b0_std, mean, sd, active, lam, obj) -> FittedModel:
    coefs = {}
    intercept = b0_std
    for j, cid in enumerate(ids):
        if active[j] and beta_std[j] != 0.0:
            raw = beta_std[j] / sd[j]
            coefs[int(cid)] = float(raw)
            intercept -= raw * mean[j]
    return FittedModel(
        intercept=float(intercept),
        coefficients=coefs,
        lam=float(lam),
        n_nonzero=len(coefs),
        objective=float(obj),
    )


def predict_proba(model: FittedModel, cohort: Cohort) -> np.ndarray:
    """Per-subject treatment probability, clamped away from 0 and 1."""
    eta = np.full(cohort.n_subjects, model.intercept)
    for cid, b in model.coefficients.items():
        col = cohort.column_of(cid)
        x = np.asarray(cohort.covariates[:, col].todense()).ravel()
        eta += b * x
    p = 1.0 / (1.0 + np.exp(-eta))
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def lambda_grid(lmax: float, grid_size: int, grid_floor_ratio: float) -> np.ndarray:
    """Log-spaced grid from lmax down to lmax * grid_floor_ratio (descending)."""
    if lmax <= 0:
        return np.zeros(grid_size)
    return lmax * np.exp(
        np.linspace(0.0, np.log(grid_floor_ratio), grid_size)
    )


def stratified_folds(labels, n_folds, rng):
    """Seeded label-stratified fold assignment; every fold gets both classes
    when class counts allow.  Returns an int array of fold ids."""
    y = np.asarray(labels)
    folds = np.empty(len(y), dtype=np.int64)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


def _oof_loglik(p, y):
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))


def cross_validate_lambda(
    cohort: Cohort,
    covariate_set,
    labels,
    n_folds: int = 10,
    grid_size: int = 20,
    grid_floor_ratio: float = 1e-3,
    seed: int = 0,
) -> float:
    """Choose the L1 strength maximizing mean out-of-fold log-likelihood.

    Ties break toward the larger lambda (the grid is scanned descending).
    """
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    y = np.asarray(labels, dtype=np.float64)
    _check_labels(y)
    ids = _ids_of(covariate_set)
    X = dense_design(cohort, ids)
    lmax = _lambda_max_dense(X, y)
    grid = lambda_grid(lmax, grid_size, grid_floor_ratio)
    if lmax <= 0:
        return 0.0

    rng = np.random.default_rng(seed)
    folds = None
    for _attempt in range(10):
        cand = stratified_folds(y, n_folds, rng)
        ok = all(
            len(np.unique(y[cand == f])) == 2 and len(np.unique(y[cand != f])) == 2
            for f in range(n_folds)
        )
        if ok:
            folds = cand
            break
    if folds is None:
        raise DegenerateLabelsError("could not build folds with both classes after 10 retries")

    oof = np.zeros((n_folds, grid_size))
    for f in range(n_folds):
        train = np.flatnonzero(folds != f)
        test = np.flatnonzero(folds == f)
        Xtr, ytr = X[train], y[train]
        Xte, yte = X[test], y[test]
        Xs, mean, sd, active = standardize(Xtr)
        beta = np.zeros(X.shape[1])
        b0 = None
        for g, lam in enumerate(grid):
            beta, b0, _ = _fit_std(Xs, ytr, lam, beta=beta, b0=b0)
            # predict on the held-out fold in raw space
            raw = np.zeros(X.shape[1])
            raw[active] = beta[active] / sd[active]
            eta = b0 - float(raw @ mean) + Xte @ raw
            p = 1.0 / (1.0 + np.exp(-eta))
            oof[f, g] = _oof_loglik(p, yte)
    mean_oof = oof.mean(axis=0)
    return float(grid[int(np.argmax(mean_oof))])
