"""Plasmode outcome simulation.

Keeps the real covariate data and treatment assignment, refits outcome and
censoring Cox models on the base cohort, then draws fresh outcome and
censoring times by inverse-transform sampling of the Breslow baselines with
the treatment coefficient of the outcome model replaced by the log of the
desired true hazard ratio.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .coxph import CoxModel, StepFunction, breslow_baseline, fit_cox_l1, linear_predictor


@dataclass(frozen=True)
class GeneratingModel:
    """Fitted outcome + censoring models with their Breslow baselines."""

    outcome_model: CoxModel
    censor_model: CoxModel
    outcome_baseline: StepFunction
    censor_baseline: StepFunction
    t_max: float

    def __post_init__(self):
        if not self.outcome_model.includes_treatment:
            raise ValueError("outcome model of a generating model must include treatment")


@dataclass(frozen=True)
class SimulatedOutcomes:
    """One replicate of simulated follow-up times and event flags."""

    followup_time: np.ndarray
    event: np.ndarray
    true_hr: float
    replicate_seed: int

    def save_csv(self, path, subject_ids, sidecar_path=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "followup_time", "event"])
            for sid, t, e in zip(subject_ids, self.followup_time, self.event):
                w.writerow([int(sid), repr(float(t)), int(e)])
        if sidecar_path is not None:
            with open(sidecar_path, "w") as fh:
                json.dump({"true_hr": self.true_hr, "replicate_seed": self.replicate_seed}, fh)


def fit_generating_model(
    cohort: Cohort,
    covariate_set,
    lambda_outcome: float,
    lambda_censor: float,
) -> GeneratingModel:
    """Fit outcome and censoring Cox models (treatment included in both) and
    their Breslow baseline cumulative hazards."""
    outcome_model = fit_cox_l1(
        cohort, covariate_set, lambda_outcome, event_flavor="outcome", include_treatment=True
    )
    censor_model = fit_cox_l1(
        cohort, covariate_set, lambda_censor, event_flavor="censoring", include_treatment=True
    )
    return GeneratingModel(
        outcome_model=outcome_model,
        censor_model=censor_model,
        outcome_baseline=breslow_baseline(outcome_model, cohort),
        censor_baseline=breslow_baseline(censor_model, cohort),
        t_max=cohort.t_max,
    )


def invert_cum_hazard(h: StepFunction, v):
    """Generalized inverse: smallest jump time t with h(t) >= v.

    Scalar v returns a float, or None when v exceeds the final cumulative
    value (no event within the baseline's support).  Array v returns an
    array with NaN in place of None.
    """
    scalar = np.isscalar(v)
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    idx = np.searchsorted(h.values, v, side="left")
    out = np.full(v.shape, np.nan)
    ok = idx < len(h.times)
    out[ok] = h.times[idx[ok]]
    if scalar:
        return None if np.isnan(out[0]) else float(out[0])
    return out


def simulate_outcomes(
    gm: GeneratingModel, cohort: Cohort, true_hr: float, replicate_seed: int
) -> SimulatedOutcomes:
    """Draw one replicate of outcome/censoring times under the target hazard ratio.

    The outcome model's treatment coefficient is replaced by ln(true_hr);
    the censoring model keeps its fitted coefficients as-is.  Subjects whose
    drawn cumulative-hazard target exceeds a baseline's support are censored
    administratively at t_max.
    """
    if true_hr <= 0:
        raise ValueError("true_hr must be positive")
    rng = np.random.default_rng(replicate_seed)
    n = cohort.n_subjects
    lp_out = linear_predictor(gm.outcome_model, cohort, treatment_coef_override=np.log(true_hr))
    lp_cens = linear_predictor(gm.censor_model, cohort)
    U = rng.random(n)
    V = rng.random(n)
    T = invert_cum_hazard(gm.outcome_baseline, -np.log(U) / np.exp(lp_out))
    C = invert_cum_hazard(gm.censor_baseline, -np.log(V) / np.exp(lp_cens))
    T = np.where(np.isnan(T), np.inf, T)
    C = np.where(np.isnan(C), np.inf, C)
    followup = np.minimum(np.minimum(T, C), gm.t_max)
    event = ((T <= C) & (T <= gm.t_max)).astype(np.int8)
    return SimulatedOutcomes(
        followup_time=followup,
        event=event,
        true_hr=float(true_hr),
        replicate_seed=int(replicate_seed),
    )
