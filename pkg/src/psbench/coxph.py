"""Cox proportional-hazards machinery.

Three jobs: L1-regularized multivariable fits (outcome and censoring models,
Breslow ties), the Breslow baseline cumulative hazard that feeds outcome
simulation, and the single-parameter stratified fit used for treatment-effect
estimation on matched strata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._kernels import cox_risk_quantities, solve_cox_cd, stratified_cox_scalar
from .cohort import Cohort
from .errors import NoEventsError, NoInformativeStrataError, NumericalError
from .logistic import (
    CONVERGENCE_TOL,
    MAX_SWEEPS,
    _ids_of,
    dense_design,
    lambda_grid,
    standardize,
)

Z95 = 1.96  # two-sided 95% normal quantile, as conventionally rounded


@dataclass(frozen=True)
class CoxModel:
    """Sparse Cox model; no intercept (absorbed by the baseline hazard)."""

    coefficients: dict            # covariate_id -> raw-scale coefficient, nonzero only
    lam: float
    includes_treatment: bool
    treatment_coef: float = 0.0
    event_flavor: str = "outcome"  # which indicator the model was fit against

    def to_json(self) -> str:
        return json.dumps(
            {
                "lambda": self.lam,
                "includes_treatment": self.includes_treatment,
                "treatment_coef": self.treatment_coef,
                "event_flavor": self.event_flavor,
                "coefficients": {str(k): v for k, v in self.coefficients.items()},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CoxModel":
        d = json.loads(text)
        return cls(
            coefficients={int(k): float(v) for k, v in d["coefficients"].items()},
            lam=float(d["lambda"]),
            includes_treatment=bool(d["includes_treatment"]),
            treatment_coef=float(d["treatment_coef"]),
            event_flavor=d.get("event_flavor", "outcome"),
        )


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous nondecreasing step function (cumulative hazard)."""

    times: np.ndarray   # strictly increasing, positive
    values: np.ndarray  # nondecreasing, nonnegative

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if len(t) != len(v):
            raise ValueError("times and values must have equal length")
        if len(t):
            if np.any(t <= 0) or np.any(np.diff(t) <= 0):
                raise ValueError("times must be strictly increasing and positive")
            if v[0] < 0 or np.any(np.diff(v) < 0):
                raise ValueError("values must be nondecreasing and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        """Value at time t (0 before the first jump)."""
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate(([0.0], self.values))
        return padded[idx]

    def to_json(self) -> str:
        return json.dumps({"times": self.times.tolist(), "values": self.values.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "StepFunction":
        d = json.loads(text)
        return cls(np.array(d["times"]), np.array(d["values"]))


@dataclass(frozen=True)
class EstimationResult:
    """Log hazard-ratio estimate with Wald 95% interval."""

    log_hr: float
    se: float
    ci_low: float
    ci_high: float
    converged: bool

    def __post_init__(self):
        if self.converged and not (self.ci_low < self.log_hr < self.ci_high):
            raise ValueError("converged estimate must satisfy ci_low < log_hr < ci_high")


def _event_vector(cohort: Cohort, event_flavor: str) -> np.ndarray:
    if event_flavor == "outcome":
        return cohort.event.astype(np.int8)
    if event_flavor == "censoring":
        return (1 - cohort.event).astype(np.int8)
    raise ValueError(f"unknown event_flavor {event_flavor!r}")


def _design_with_treatment(cohort, ids, include_treatment):
    X = dense_design(cohort, ids)
    pen = np.ones(X.shape[1] + (1 if include_treatment else 0))
    if include_treatment:
        X = np.hstack([X, cohort.treatment.astype(np.float64)[:, None]])
        pen[-1] = 0.0
    return X, pen


def _raw_coefs(beta_std, sd, active):
    raw = np.zeros_like(beta_std)
    raw[active] = beta_std[active] / sd[active]
    return raw


def fit_cox_l1(
    cohort: Cohort,
    covariate_set,
    lam: float,
    event_flavor: str = "outcome",
    include_treatment: bool = True,
) -> CoxModel:
    """L1-penalized Cox fit (Breslow ties) by cyclic coordinate descent.

    The censoring flavor swaps the event indicator so the same machinery
    yields the censoring-time model.  The treatment column, when included,
    is unpenalized.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    event = _event_vector(cohort, event_flavor)
    if not np.any(event == 1):
        raise NoEventsError(f"no events under flavor {event_flavor!r}")
    ids = _ids_of(covariate_set)
    X, pen = _design_with_treatment(cohort, ids, include_treatment)
    Xs, mean, sd, active = standardize(X)
    time = cohort.followup_time.astype(np.float64)
    order = np.argsort(time, kind="stable").astype(np.int64)
    beta = np.zeros(Xs.shape[1])
    beta, obj, _, _ = solve_cox_cd(
        Xs, time, event, order, lam, pen, beta, CONVERGENCE_TOL, MAX_SWEEPS
    )
    if not np.isfinite(obj):
        raise NumericalError("non-finite objective during Cox fit")
    raw = _raw_coefs(beta, sd, active)
    coefs = {int(ids[j]): float(raw[j]) for j in range(len(ids)) if raw[j] != 0.0}
    treatment_coef = float(raw[-1]) if include_treatment else 0.0
    return CoxModel(
        coefficients=coefs,
        lam=float(lam),
        includes_treatment=include_treatment,
        treatment_coef=treatment_coef,
        event_flavor=event_flavor,
    )


def linear_predictor(
    model: CoxModel, cohort: Cohort, treatment_coef_override: float | None = None
) -> np.ndarray:
    """Raw-scale linear predictor of a CoxModel over a cohort."""
    lp = np.zeros(cohort.n_subjects)
    for cid, b in model.coefficients.items():
        col = cohort.column_of(cid)
        lp += b * np.asarray(cohort.covariates[:, col].todense(), dtype=np.float64).ravel()
    if model.includes_treatment or treatment_coef_override is not None:
        coef = model.treatment_coef if treatment_coef_override is None else treatment_coef_override
        lp += coef * cohort.treatment
    return lp


def lambda_max_cox(
    cohort: Cohort,
    covariate_set,
    event_flavor: str = "outcome",
    include_treatment: bool = True,
) -> float:
    """Smallest L1 strength at which all penalized Cox coefficients are zero.

    Computed from the partial-likelihood score at the solution of the
    unpenalized-columns-only model (just the treatment coefficient, or the
    null model when treatment is excluded)."""
    event = _event_vector(cohort, event_flavor)
    if not np.any(event == 1):
        raise NoEventsError(f"no events under flavor {event_flavor!r}")
    ids = _ids_of(covariate_set)
    X, pen = _design_with_treatment(cohort, ids, include_treatment)
    Xs, mean, sd, active = standardize(X)
    time = cohort.followup_time.astype(np.float64)
    order = np.argsort(time, kind="stable").astype(np.int64)
    n = cohort.n_subjects
    if include_treatment:
        huge = 1e12  # only the unpenalized column can move
        beta = np.zeros(Xs.shape[1])
        beta, _, _, _ = solve_cox_cd(
            Xs, time, event, order, huge, pen, beta, CONVERGENCE_TOL, MAX_SWEEPS
        )
        lp = Xs @ beta
    else:
        lp = np.zeros(n)
    _, mart, _ = cox_risk_quantities(lp, order, time, event)
    m = len(ids)
    if m == 0:
        return 0.0
    score = Xs[:, :m].T @ mart / n
    return float(np.max(np.abs(score)))


def breslow_baseline(model: CoxModel, cohort: Cohort) -> StepFunction:
    """Breslow baseline cumulative hazard of a fitted model over its cohort."""
    event = _event_vector(cohort, model.event_flavor)
    time = cohort.followup_time.astype(np.float64)
    lp = linear_predictor(model, cohort)
    elp = np.exp(lp)
    order = np.argsort(time, kind="stable")
    # suffix sums of exp(lp) give risk-set denominators at each distinct time
    sorted_t = time[order]
    sorted_e = event[order]
    sorted_elp = elp[order]
    s0_suffix = np.cumsum(sorted_elp[::-1])[::-1]
    jump_times = []
    jump_values = []
    H = 0.0
    k = 0
    n = len(order)
    while k < n:
        k2 = k
        t = sorted_t[k]
        d = 0
        while k2 < n and sorted_t[k2] == t:
            d += int(sorted_e[k2])
            k2 += 1
        if d > 0:
            H += d / s0_suffix[k]
            jump_times.append(t)
            jump_values.append(H)
        k = k2
    return StepFunction(np.array(jump_times), np.array(jump_values))


def fit_cox_stratified(times, events, treatment, strata) -> EstimationResult:
    """Stratified Cox fit of the single treatment coefficient (Breslow ties).

    Strata with a single subject, no events, or a single treatment arm carry
    no information and drop out.  Monotone likelihood is flagged as a
    non-converged result rather than raised.
    """
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=np.int8)
    z = np.asarray(treatment, dtype=np.float64)
    strata = np.asarray(strata)

    keep_strata = []
    for s in np.unique(strata):
        mask = strata == s
        if mask.sum() < 2:
            continue
        if not np.any(events[mask] == 1):
            continue
        if len(np.unique(z[mask])) < 2:
            continue
        keep_strata.append(s)
    if not keep_strata:
        raise NoInformativeStrataError("no stratum with events and both treatment arms")

    keep = np.isin(strata, keep_strata)
    times, events, z, strata = times[keep], events[keep], z[keep], strata[keep]
    # relabel strata densely and sort by (stratum, time)
    _, stratum_idx = np.unique(strata, return_inverse=True)
    order = np.lexsort((times, stratum_idx)).astype(np.int64)
    counts = np.bincount(stratum_idx)
    starts = np.concatenate(([0], np.cumsum(counts))).astype(np.int64)

    beta = 0.0
    converged = False
    info = 0.0
    ll, grad, info = stratified_cox_scalar(beta, z, times, events, order, starts)
    for _ in range(100):
        if info <= 1e-12:
            break
        step = grad / info
        # halve overlong steps to keep the likelihood nondecreasing
        new_beta = beta + step
        new_ll, new_grad, new_info = stratified_cox_scalar(new_beta, z, times, events, order, starts)
        halvings = 0
        while new_ll < ll - 1e-12 and halvings < 30:
            step *= 0.5
            new_beta = beta + step
            new_ll, new_grad, new_info = stratified_cox_scalar(
                new_beta, z, times, events, order, starts
            )
            halvings += 1
        beta, ll, grad, info = new_beta, new_ll, new_grad, new_info
        if abs(step) < 1e-10:
            converged = True
            break
        if abs(beta) > 30.0:  # monotone likelihood: estimate diverges
            break

    if not converged or info <= 0.0:
        return EstimationResult(
            log_hr=float(beta), se=np.inf, ci_low=-np.inf, ci_high=np.inf, converged=False
        )
    se = float(1.0 / np.sqrt(info))
    return EstimationResult(
        log_hr=float(beta),
        se=se,
        ci_low=float(beta - Z95 * se),
        ci_high=float(beta + Z95 * se),
        converged=True,
    )


def _heldout_partial_loglik(lp, time, event) -> float:
    order = np.argsort(time, kind="stable").astype(np.int64)
    _, _, negll = cox_risk_quantities(
        lp.astype(np.float64), order, time.astype(np.float64), event.astype(np.int8)
    )
    return -float(negll)


def cross_validate_cox_lambda(
    cohort: Cohort,
    covariate_set,
    n_folds: int = 10,
    seed: int = 0,
    grid_size: int = 20,
    grid_floor_ratio: float = 1e-3,
    event_flavor: str = "outcome",
    include_treatment: bool = True,
) -> float:
    """Choose the Cox L1 strength maximizing mean out-of-fold partial likelihood.

    Folds are seeded random partitions stratified by the event indicator;
    ties break toward the larger lambda.
    """
    from .logistic import stratified_folds  # shares the fold construction

    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    event = _event_vector(cohort, event_flavor)
    if not np.any(event == 1):
        raise NoEventsError(f"no events under flavor {event_flavor!r}")
    ids = _ids_of(covariate_set)
    X, pen = _design_with_treatment(cohort, ids, include_treatment)
    time = cohort.followup_time.astype(np.float64)
    lmax = lambda_max_cox(cohort, covariate_set, event_flavor, include_treatment)
    if lmax <= 0:
        return 0.0
    grid = lambda_grid(lmax, grid_size, grid_floor_ratio)

    rng = np.random.default_rng(seed)
    folds = None
    for _attempt in range(10):
        cand = stratified_folds(event, n_folds, rng)
        ok = all(
            np.any(event[cand == f] == 1) and np.any(event[cand != f] == 1)
            for f in range(n_folds)
        )
        if ok:
            folds = cand
            break
    if folds is None:
        raise NoEventsError("could not build folds with events after 10 retries")

    oof = np.zeros((n_folds, grid_size))
    for f in range(n_folds):
        train = np.flatnonzero(folds != f)
        test = np.flatnonzero(folds == f)
        Xtr = X[train]
        Xs, mean, sd, active = standardize(Xtr)
        tr_time = time[train]
        tr_event = event[train]
        tr_order = np.argsort(tr_time, kind="stable").astype(np.int64)
        beta = np.zeros(X.shape[1])
        for g, lam in enumerate(grid):
            beta, _, _, _ = solve_cox_cd(
                Xs, tr_time, tr_event, tr_order, lam, pen, beta, CONVERGENCE_TOL, MAX_SWEEPS
            )
            raw = _raw_coefs(beta, sd, active)
            lp_test = X[test] @ raw
            oof[f, g] = _heldout_partial_loglik(lp_test, time[test], event[test])
    mean_oof = oof.mean(axis=0)
    return float(grid[int(np.argmax(mean_oof))])
