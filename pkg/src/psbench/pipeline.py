"""Covariate-set strategies, simulated-instrument injection, and PS/preference scores.

Implements the model-building side of the study grid: the all-covariates set
with exclusion lists, the prevalence-then-relative-risk screen, the nonzero
set of a multivariable outcome model, plus injection of a simulated
instrument with controlled prevalence and treatment relative risk.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .cohort import Cohort, covariate_prevalence
from .coxph import CoxModel
from .errors import ConfigurationError, DegenerateIvError
from .logistic import FittedModel, cross_validate_lambda, fit_logistic_l1, predict_proba


@dataclass(frozen=True)
class CovariateSet:
    """Ordered set of covariate ids with the strategy that produced it."""

    ids: tuple
    strategy_tag: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("covariate set contains duplicate ids")
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self):
        return len(self.ids)

    def to_json(self) -> str:
        return json.dumps({"strategy_tag": self.strategy_tag, "ids": list(self.ids)})

    @classmethod
    def from_json(cls, text: str) -> "CovariateSet":
        d = json.loads(text)
        return cls(ids=tuple(d["ids"]), strategy_tag=d["strategy_tag"])


@dataclass(frozen=True)
class IvSpec:
    """Simulated instrument: overall prevalence and treated:comparator prevalence ratio."""

    prevalence: float
    rr: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.prevalence < 1.0):
            raise ConfigurationError("IV prevalence must lie in (0, 1)")
        if self.rr < 1.0:
            raise ConfigurationError("IV relative risk must be >= 1")

    def arm_prevalences(self, n_treated: int, n_comparator: int):
        """(p_treated, p_comparator) solving the overall-prevalence and ratio constraints."""
        p0 = self.prevalence * (n_treated + n_comparator) / (self.rr * n_treated + n_comparator)
        p1 = self.rr * p0
        if not (0.0 < p0 < 1.0 and 0.0 < p1 < 1.0):
            raise ConfigurationError(
                f"derived arm prevalences ({p1:.4g}, {p0:.4g}) fall outside (0, 1)"
            )
        return p1, p0


def select_all(cohort: Cohort, exclude=()) -> CovariateSet:
    """All cohort covariates minus an exclusion list (e.g. year indicators)."""
    excl = {int(e) for e in exclude}
    known = set(int(c) for c in cohort.covariate_ids)
    missing = excl - known
    if missing:
        raise ConfigurationError(f"exclusions not in cohort: {sorted(missing)}")
    ids = tuple(int(c) for c in cohort.covariate_ids if int(c) not in excl)
    return CovariateSet(ids=ids, strategy_tag="exclude" if excl else "all")


def apparent_relative_risk(n_events_exposed, n_exposed, n_events_unexposed, n_unexposed) -> float:
    """Marginal covariate-outcome relative risk; 0.5 added to all four cells
    of the 2x2 table whenever any cell is zero."""
    a = float(n_events_exposed)
    b = float(n_exposed - n_events_exposed)
    c = float(n_events_unexposed)
    d = float(n_unexposed - n_events_unexposed)
    if min(a, b, c, d) == 0.0:
        a += 0.5
        b += 0.5
        c += 0.5
        d += 0.5
    return (a / (a + b)) / (c / (c + d))


def hdps_screen(cohort: Cohort, n_prevalent: int = 500, n_select: int = 200) -> CovariateSet:
    """Prevalence-then-apparent-relative-risk screen.

    Takes the n_prevalent most prevalent covariates, scores each by
    max(RR, 1/RR) against the outcome event, and keeps the n_select top
    ranked.  All ties break toward the smaller covariate id.
    """
    prev = covariate_prevalence(cohort)
    nonzero = np.flatnonzero(prev > 0)
    if len(nonzero) < n_prevalent:
        raise ConfigurationError(
            f"only {len(nonzero)} covariates with nonzero prevalence, need {n_prevalent}"
        )
    ids = cohort.covariate_ids
    # sort by (-prevalence, id): descending prevalence, ties to smaller id
    order = sorted(nonzero, key=lambda j: (-prev[j], ids[j]))
    top_prev = order[:n_prevalent]

    events = cohort.event.astype(np.float64)
    n = cohort.n_subjects
    n_events = float(events.sum())
    X = cohort.covariates.tocsc()
    scored = []
    for j in top_prev:
        col = np.asarray(X[:, j].todense()).ravel()
        n_exposed = int(col.sum())
        ev_exposed = int(events[col == 1].sum())
        rr = apparent_relative_risk(
            ev_exposed, n_exposed, int(n_events) - ev_exposed, n - n_exposed
        )
        score = max(rr, 1.0 / rr)
        scored.append((score, int(ids[j])))
    scored.sort(key=lambda t: (-t[0], t[1]))
    chosen = tuple(cid for _, cid in scored[:n_select])
    return CovariateSet(ids=chosen, strategy_tag="hdps")


def cox_nonzero_set(cox_model: CoxModel) -> CovariateSet:
    """Covariate ids with nonzero coefficients in a fitted outcome model."""
    ids = tuple(sorted(int(c) for c, v in cox_model.coefficients.items() if v != 0.0))
    return CovariateSet(ids=ids, strategy_tag="cox-nonzero")


def inject_iv(cohort: Cohort, spec: IvSpec):
    """Return (cohort with one added instrument covariate, its new id).

    Carrier counts are exact per arm: round(n_arm * p_arm) subjects sampled
    uniformly without replacement.  Nothing else about the cohort changes,
    and the new covariate must never enter an outcome-generating model.
    """
    n1 = int((cohort.treatment == 1).sum())
    n0 = int((cohort.treatment == 0).sum())
    p1, p0 = spec.arm_prevalences(n1, n0)
    k1 = int(round(n1 * p1))
    k0 = int(round(n0 * p0))
    if k1 == 0 or k0 == 0:
        raise DegenerateIvError(
            f"rounded carrier counts ({k1} treated, {k0} comparator) include zero"
        )
    rng = np.random.default_rng(spec.seed)
    treated_rows = np.flatnonzero(cohort.treatment == 1)
    comparator_rows = np.flatnonzero(cohort.treatment == 0)
    carriers = np.concatenate(
        [
            rng.choice(treated_rows, size=k1, replace=False),
            rng.choice(comparator_rows, size=k0, replace=False),
        ]
    )
    new_id = int(cohort.covariate_ids.max()) + 1 if cohort.n_covariates else 0
    col = sparse.csr_matrix(
        (np.ones(len(carriers), dtype=np.int8), (carriers, np.zeros(len(carriers), dtype=np.int64))),
        shape=(cohort.n_subjects, 1),
    )
    new_cohort = Cohort(
        subject_ids=cohort.subject_ids,
        treatment=cohort.treatment,
        covariates=sparse.hstack([cohort.covariates, col], format="csr"),
        covariate_ids=np.concatenate([cohort.covariate_ids, [new_id]]),
        followup_time=cohort.followup_time,
        event=cohort.event,
        t_max=cohort.t_max,
    )
    return new_cohort, new_id


def estimate_ps(
    cohort: Cohort,
    covariate_set,
    cv_seed: int = 0,
    n_folds: int = 10,
    grid_size: int = 20,
    grid_floor_ratio: float = 1e-3,
):
    """Cross-validate the L1 strength, refit on the full data, and score.

    Returns (per-subject PS array, FittedModel).
    """
    labels = cohort.treatment
    ids = getattr(covariate_set, "ids", covariate_set)
    if len(ids) == 0:
        lam = 0.0
    else:
        lam = cross_validate_lambda(
            cohort,
            covariate_set,
            labels,
            n_folds=n_folds,
            grid_size=grid_size,
            grid_floor_ratio=grid_floor_ratio,
            seed=cv_seed,
        )
    model = fit_logistic_l1(cohort, covariate_set, labels, lam)
    return predict_proba(model, cohort), model


def preference_score(ps, treated_fraction: float) -> np.ndarray:
    """Rescale PS so 0.5 means indifference given overall treatment prevalence.

    Solves ln(F/(1-F)) = ln(S/(1-S)) - ln(P/(1-P)) elementwise.
    """
    s = np.clip(np.asarray(ps, dtype=np.float64), 1e-12, 1 - 1e-12)
    p = min(max(float(treated_fraction), 1e-12), 1 - 1e-12)
    logit = np.log(s / (1 - s)) - np.log(p / (1 - p))
    return 1.0 / (1.0 + np.exp(-logit))


def equipoise_fraction(preference_scores, low: float = 0.3, high: float = 0.7) -> float:
    """Fraction of subjects whose preference score lies in [low, high]."""
    f = np.asarray(preference_scores, dtype=np.float64)
    return float(np.mean((f >= low) & (f <= high)))
