"""Shared fixtures and independent numerical oracles.

The oracles here deliberately avoid the package's solvers: plain
Newton-Raphson for logistic MLEs, direct partial-likelihood evaluation for
Cox models, and grid refinement for one-parameter maximizations.  They are
slow and simple on purpose.
"""

import numpy as np
import pytest
from scipy import sparse

from psbench.cohort import Cohort


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Trigger jit compilation of the numeric kernels before any timed test."""
    import psbench as pb

    rng = np.random.default_rng(0)
    co = make_cohort(rng, n=40, m=3)
    pb.fit_logistic_l1(co, co.covariate_ids, co.treatment, 0.05)
    pb.fit_cox_l1(co, co.covariate_ids, 0.05)
    pb.fit_cox_stratified(
        co.followup_time, co.event, co.treatment, np.zeros(co.n_subjects, dtype=int)
    )


def make_cohort(rng, n=60, m=4, event_rate=0.5, t_max=100.0):
    """Small random binary cohort with both arms and at least one event."""
    while True:
        X = (rng.random((n, m)) < 0.4).astype(np.int8)
        z = (rng.random(n) < 0.4).astype(np.int8)
        t = rng.uniform(1.0, t_max, size=n)
        e = (rng.random(n) < event_rate).astype(np.int8)
        if 0 < z.sum() < n and e.sum() > 0:
            return Cohort(
                subject_ids=np.arange(n, dtype=np.int64),
                treatment=z,
                covariates=sparse.csr_matrix(X),
                covariate_ids=np.arange(m, dtype=np.int64),
                followup_time=t,
                event=e,
                t_max=t_max,
            )


def newton_logistic(X, y, tol=1e-12, max_iter=200):
    """Unpenalized logistic MLE (intercept + coefficients) by Newton-Raphson."""
    n, m = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(m + 1)
    for _ in range(max_iter):
        eta = A @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1 - p)
        grad = A.T @ (y - p)
        hess = A.T @ (A * w[:, None])
        step = np.linalg.solve(hess + 1e-12 * np.eye(m + 1), grad)
        beta += step
        if np.max(np.abs(step)) < tol:
            break
    return beta[0], beta[1:]


def cox_partial_loglik(beta, X, time, event):
    """Breslow-ties Cox log partial likelihood, direct O(n^2) evaluation."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] != len(time):
        X = X.T
    lp = X @ np.atleast_1d(beta)
    ll = 0.0
    for t in np.unique(time[event == 1]):
        d = (time == t) & (event == 1)
        risk = time >= t
        ll += lp[d].sum() - d.sum() * np.log(np.exp(lp[risk]).sum())
    return ll


def grid_maximize(fn, lo=-8.0, hi=8.0, rounds=6, pts=401):
    """1-D brute-force grid maximization with interval refinement."""
    for _ in range(rounds):
        grid = np.linspace(lo, hi, pts)
        vals = np.array([fn(g) for g in grid])
        k = int(np.argmax(vals))
        lo = grid[max(k - 1, 0)]
        hi = grid[min(k + 1, pts - 1)]
    return 0.5 * (lo + hi)
