"""Measurement layer: empirical-null fitting, covariate balance, bias/coverage.

The empirical null is a two-parameter normal of systematic error on the
log-HR scale, fitted by maximum likelihood to negative-control estimates
with each estimate's sampling error added in quadrature.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .cohort import Cohort
from .coxph import Z95
from .errors import InsufficientControlsError
from .matching import MatchResult

SMD_THRESHOLD = 0.1


@dataclass(frozen=True)
class NullDistribution:
    """Normal distribution of systematic bias fitted from negative controls."""

    mu: float
    sigma: float
    n_controls: int
    log_likelihood: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.n_controls < 2:
            raise InsufficientControlsError("a proper null fit needs >= 2 controls")

    def to_json(self) -> str:
        return json.dumps(
            {
                "mu": self.mu,
                "sigma": self.sigma,
                "n_controls": self.n_controls,
                "log_likelihood": self.log_likelihood,
            }
        )


@dataclass(frozen=True)
class BalanceRow:
    covariate_id: int
    smd_before: float
    smd_after: float


def _null_negloglik_and_grad(params, est, tau2):
    mu, s = params
    var = np.exp(2 * s) + tau2
    resid = est - mu
    nll = 0.5 * np.sum(np.log(2 * np.pi * var) + resid**2 / var)
    d_mu = -np.sum(resid / var)
    d_var = 0.5 * np.sum(1.0 / var - resid**2 / var**2)
    d_s = d_var * 2 * np.exp(2 * s)
    return nll, np.array([d_mu, d_s])


def fit_empirical_null(estimates, ses) -> NullDistribution:
    """Maximum-likelihood normal null (mu, sigma) with per-estimate sampling
    noise tau_i added in quadrature; sigma searched as exp(s)."""
    est = np.asarray(estimates, dtype=np.float64)
    tau = np.asarray(ses, dtype=np.float64)
    if len(est) != len(tau):
        raise ValueError("estimates and ses must have equal length")
    if len(est) < 2:
        raise InsufficientControlsError("need at least 2 negative-control estimates")
    if np.any(tau <= 0):
        raise ValueError("standard errors must be positive")
    tau2 = tau**2

    mu0 = float(np.mean(est))
    excess = max(float(np.var(est) - np.mean(tau2)), 1e-8)
    s0 = 0.5 * np.log(excess)
    res = optimize.minimize(
        _null_negloglik_and_grad,
        x0=np.array([mu0, s0]),
        args=(est, tau2),
        jac=True,
        method="L-BFGS-B",
        options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 1000},
    )
    mu, s = res.x
    sigma = float(np.exp(s))
    if sigma < 1e-4:  # boundary optimum: no systematic spread beyond sampling noise
        sigma = 0.0
    nll, _ = _null_negloglik_and_grad(res.x, est, tau2)
    return NullDistribution(
        mu=float(mu),
        sigma=sigma,
        n_controls=len(est),
        log_likelihood=float(-nll),
    )


def smd(cohort: Cohort, covariate_id: int, weights=None) -> float:
    """Standardized mean difference of a binary covariate (treated minus
    comparator), optionally with per-subject nonnegative weights.

    The pooled SD uses the binary variance p(1-p) computed on weighted
    prevalences.  Zero pooled variance with unequal means yields a signed
    infinity sentinel (reported as unbalanced)."""
    col = cohort.column_of(covariate_id)
    x = np.asarray(cohort.covariates[:, col].todense(), dtype=np.float64).ravel()
    if weights is None:
        weights = np.ones(cohort.n_subjects)
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    means = {}
    for arm in (1, 0):
        mask = cohort.treatment == arm
        total = w[mask].sum()
        if total <= 0:
            raise ValueError(f"arm {arm} has zero total weight")
        means[arm] = float(w[mask] @ x[mask] / total)
    p1, p0 = means[1], means[0]
    pooled = np.sqrt((p1 * (1 - p1) + p0 * (1 - p0)) / 2.0)
    if pooled == 0.0:
        if p1 == p0:
            return 0.0
        return np.inf if p1 > p0 else -np.inf
    return (p1 - p0) / pooled


def matched_weights(cohort: Cohort, match: MatchResult) -> np.ndarray:
    """Stratum-normalized weights: treated weight 1, each comparator weighted
    1 / (its stratum's comparator count), unmatched subjects 0."""
    row_of = {int(s): i for i, s in enumerate(cohort.subject_ids)}
    w = np.zeros(cohort.n_subjects)
    for treated_id, comps in match.strata:
        w[row_of[treated_id]] = 1.0
        for c in comps:
            w[row_of[c]] = 1.0 / len(comps)
    return w


def balance_table(cohort: Cohort, covariate_set, match: MatchResult):
    """Per-covariate SMD before (all subjects) and after matching.

    Returns (list of BalanceRow, count of |smd_after| > 0.1)."""
    ids = getattr(covariate_set, "ids", covariate_set)
    w_after = matched_weights(cohort, match)
    rows = []
    n_cross = 0
    for cid in ids:
        before = smd(cohort, cid)
        after = smd(cohort, cid, weights=w_after)
        rows.append(BalanceRow(covariate_id=int(cid), smd_before=before, smd_after=after))
        if not np.isfinite(after) or abs(after) > SMD_THRESHOLD:
            n_cross += 1
    return rows, n_cross


def save_balance_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate_id", "smd_before", "smd_after"])
        for r in rows:
            w.writerow([r.covariate_id, repr(float(r.smd_before)), repr(float(r.smd_after))])


@dataclass(frozen=True)
class BiasSummary:
    mean_bias: float
    sd: float
    n_converged: int
    n_nonconverged: int


def bias_summary(estimates, true_hr: float) -> BiasSummary:
    """Mean and sample SD of (log-HR estimate - ln(true_hr)) over converged
    replicates; non-converged replicates are counted, not averaged."""
    conv = [e.log_hr for e in estimates if e.converged]
    n_bad = sum(1 for e in estimates if not e.converged)
    if not conv:
        raise ValueError("no converged estimates to summarize")
    bias = np.array(conv) - np.log(true_hr)
    sd = float(np.std(bias, ddof=1)) if len(bias) > 1 else 0.0
    return BiasSummary(
        mean_bias=float(np.mean(bias)),
        sd=sd,
        n_converged=len(conv),
        n_nonconverged=n_bad,
    )


def coverage(estimates, ses, true_hr: float) -> float:
    """Fraction of Wald 95% intervals containing ln(true_hr)."""
    est = np.asarray(estimates, dtype=np.float64)
    se = np.asarray(ses, dtype=np.float64)
    if len(est) != len(se):
        raise ValueError("estimates and ses must have equal length")
    target = np.log(true_hr)
    lo = est - Z95 * se
    hi = est + Z95 * se
    return float(np.mean((lo <= target) & (target <= hi)))


def save_estimates_csv(rows, path):
    """rows: iterable of (label, EstimationResult)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "log_hr", "se", "ci_low", "ci_high", "converged"])
        for label, e in rows:
            w.writerow(
                [
                    label,
                    repr(float(e.log_hr)),
                    repr(float(e.se)),
                    repr(float(e.ci_low)),
                    repr(float(e.ci_high)),
                    int(e.converged),
                ]
            )
