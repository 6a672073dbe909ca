"""Claims-style cohort data model, synthetic generator, and CSV I/O.

A cohort holds one row per subject (treatment arm, follow-up time, event
flag) and a sparse binary subject x covariate matrix.  Covariates encode
presence/absence of claims features (diagnoses, drugs, procedures, year
indicators); the only stored entries are ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import CohortFormatError, ConfigurationError, ReferentialIntegrityError


@dataclass(frozen=True)
class Cohort:
    """Immutable cohort: subjects, arms, sparse binary covariates, follow-up."""

    subject_ids: np.ndarray        # (n,) int64, unique
    treatment: np.ndarray          # (n,) int8, 1 = target drug, 0 = comparator
    covariates: sparse.csr_matrix  # (n, m) binary, data entries all 1
    covariate_ids: np.ndarray      # (m,) int64, column -> stable covariate id
    followup_time: np.ndarray      # (n,) float64, days
    event: np.ndarray              # (n,) int8
    t_max: float                   # administrative end of follow-up, days

    def __post_init__(self):
        n = len(self.subject_ids)
        if n == 0:
            raise ConfigurationError("cohort has no subjects")
        if len(np.unique(self.subject_ids)) != n:
            raise ConfigurationError("duplicate subject ids")
        for name in ("treatment", "followup_time", "event"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"{name} length != n_subjects")
        if self.covariates.shape != (n, len(self.covariate_ids)):
            raise ConfigurationError("covariate matrix shape mismatch")
        if len(np.unique(self.covariate_ids)) != len(self.covariate_ids):
            raise ConfigurationError("duplicate covariate ids")
        if self.covariates.nnz and not np.all(self.covariates.data == 1):
            raise ConfigurationError("sparse covariate entries must all be 1")
        if np.any(self.followup_time < 0) or np.any(self.followup_time > self.t_max):
            raise ConfigurationError("followup_time outside [0, t_max]")
        if not (np.any(self.treatment == 1) and np.any(self.treatment == 0)):
            raise ConfigurationError("need at least one treated and one comparator subject")

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_ids)

    def column_of(self, covariate_id: int) -> int:
        """Column index of a covariate id; raises KeyError if absent."""
        idx = self._id_to_col().get(int(covariate_id))
        if idx is None:
            raise KeyError(f"unknown covariate id {covariate_id}")
        return idx

    def columns_of(self, covariate_ids) -> np.ndarray:
        return np.array([self.column_of(c) for c in covariate_ids], dtype=np.int64)

    def _id_to_col(self) -> dict:
        cache = getattr(self, "_id_to_col_cache", None)
        if cache is None:
            cache = {int(c): j for j, c in enumerate(self.covariate_ids)}
            object.__setattr__(self, "_id_to_col_cache", cache)
        return cache

    def equals(self, other: "Cohort") -> bool:
        return (
            np.array_equal(self.subject_ids, other.subject_ids)
            and np.array_equal(self.treatment, other.treatment)
            and np.array_equal(self.covariate_ids, other.covariate_ids)
            and np.array_equal(self.followup_time, other.followup_time)
            and np.array_equal(self.event, other.event)
            and self.t_max == other.t_max
            and (self.covariates != other.covariates).nnz == 0
        )


@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for the synthetic claims-style cohort generator."""

    n_treated: int
    n_comparator: int
    n_covariates: int
    prevalence_range: tuple = (0.01, 0.5)
    n_confounders: int = 0
    treatment_coef_scale: float = 1.0
    outcome_coef_scale: float = 1.0
    baseline_hazard_rate: float = 1e-3   # events per day
    censor_rate: float = 5e-4            # per day
    t_max: float = 365.0
    seed: int = 0

    def __post_init__(self):
        low, high = self.prevalence_range
        if self.n_treated < 1 or self.n_comparator < 1:
            raise ConfigurationError("need at least one subject per arm")
        if self.n_covariates < 0:
            raise ConfigurationError("n_covariates must be nonnegative")
        if not (0.0 < low <= high < 1.0):
            raise ConfigurationError("prevalence_range must satisfy 0 < low <= high < 1")
        if not (0 <= self.n_confounders <= self.n_covariates):
            raise ConfigurationError("n_confounders must be in [0, n_covariates]")
        if self.treatment_coef_scale < 0 or self.outcome_coef_scale < 0:
            raise ConfigurationError("coefficient scales must be nonnegative")
        if self.baseline_hazard_rate <= 0 or self.t_max <= 0:
            raise ConfigurationError("baseline_hazard_rate and t_max must be positive")
        if self.censor_rate < 0:
            raise ConfigurationError("censor_rate must be nonnegative")


def _child_rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def target_prevalences(config: GeneratorConfig) -> np.ndarray:
    """Per-covariate marginal prevalences the generator aims for (log-uniform)."""
    rng = _child_rngs(config.seed, 4)[0]
    low, high = config.prevalence_range
    return np.exp(rng.uniform(np.log(low), np.log(high), size=config.n_covariates))


def generating_coefficients(config: GeneratorConfig):
    """Ground-truth (treatment, outcome) coefficient vectors of the generator.

    Confounders get sign-matched nonzero coefficients in both models so the
    induced confounding is systematic; all other covariates get zeros.
    """
    rng = _child_rngs(config.seed, 4)[1]
    m = config.n_covariates
    idx = rng.choice(m, size=config.n_confounders, replace=False) if config.n_confounders else np.array([], dtype=np.int64)
    signs = rng.choice(np.array([-1.0, 1.0]), size=config.n_confounders)
    beta_t = np.zeros(m)
    beta_o = np.zeros(m)
    beta_t[idx] = signs * rng.uniform(0.5, 1.0, size=config.n_confounders) * config.treatment_coef_scale
    beta_o[idx] = signs * rng.uniform(0.5, 1.0, size=config.n_confounders) * config.outcome_coef_scale
    return beta_t, beta_o, np.sort(idx)


def generate_cohort(config: GeneratorConfig) -> Cohort:
    """Generate a synthetic cohort with known confounding structure.

    Covariates are independent Bernoulli columns with log-uniform prevalence.
    Treatment is assigned by ranking a logistic latent score (covariate score
    plus standard logistic noise) so arm sizes are exact.  Outcome times come
    from an exponential-baseline proportional-hazards model over the same
    confounders; censoring is independent exponential, truncated at t_max.
    """
    rngs = _child_rngs(config.seed, 4)
    n = config.n_treated + config.n_comparator
    m = config.n_covariates
    prev = target_prevalences(config)

    x_rng = rngs[2]
    cols = []
    rows = []
    for j in range(m):
        hit = np.flatnonzero(x_rng.random(n) < prev[j])
        rows.append(hit)
        cols.append(np.full(len(hit), j, dtype=np.int64))
    if m:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
    else:
        rows = np.array([], dtype=np.int64)
        cols = np.array([], dtype=np.int64)
    X = sparse.csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, m)
    )

    beta_t, beta_o, _ = generating_coefficients(config)
    o_rng = rngs[3]

    score = X @ beta_t if m else np.zeros(n)
    latent = score + o_rng.logistic(size=n)
    treated_idx = np.argsort(-latent, kind="stable")[: config.n_treated]
    treatment = np.zeros(n, dtype=np.int8)
    treatment[treated_idx] = 1

    rate = config.baseline_hazard_rate * np.exp(X @ beta_o if m else np.zeros(n))
    T = o_rng.exponential(1.0 / rate)
    if config.censor_rate > 0:
        C = o_rng.exponential(1.0 / config.censor_rate, size=n)
    else:
        C = np.full(n, np.inf)
    followup = np.minimum(np.minimum(T, C), config.t_max)
    event = ((T <= C) & (T <= config.t_max)).astype(np.int8)

    return Cohort(
        subject_ids=np.arange(n, dtype=np.int64),
        treatment=treatment,
        covariates=X,
        covariate_ids=np.arange(m, dtype=np.int64),
        followup_time=followup,
        event=event,
        t_max=float(config.t_max),
    )


def covariate_prevalence(cohort: Cohort) -> np.ndarray:
    """Fraction of subjects carrying each covariate, aligned with covariate_ids."""
    counts = np.asarray(cohort.covariates.sum(axis=0)).ravel()
    return counts / cohort.n_subjects


def save_cohort(cohort: Cohort, subjects_path, covariates_path) -> None:
    """Write the two-file CSV representation (subjects + covariate presence list)."""
    with open(subjects_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "treatment", "followup_time", "event"])
        for i in range(cohort.n_subjects):
            w.writerow(
                [
                    int(cohort.subject_ids[i]),
                    int(cohort.treatment[i]),
                    repr(float(cohort.followup_time[i])),
                    int(cohort.event[i]),
                ]
            )
    coo = cohort.covariates.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(covariates_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "covariate_id"])
        for k in order:
            w.writerow([int(cohort.subject_ids[coo.row[k]]), int(cohort.covariate_ids[coo.col[k]])])


def load_cohort(subjects_path, covariates_path, t_max: float | None = None) -> Cohort:
    """Load a cohort saved by save_cohort; validates every row.

    t_max defaults to the maximum follow-up time seen in the subject file.
    """
    subject_ids = []
    treatment = []
    followup = []
    event = []
    with open(subjects_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "treatment", "followup_time", "event"]:
            raise CohortFormatError(subjects_path, 1, "bad subject-file header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise CohortFormatError(subjects_path, line_no, "expected 4 fields")
            try:
                sid = int(row[0])
                tr = int(row[1])
                fu = float(row[2])
                ev = int(row[3])
            except ValueError as exc:
                raise CohortFormatError(subjects_path, line_no, f"unparseable field: {exc}") from exc
            if sid < 0:
                raise CohortFormatError(subjects_path, line_no, "negative subject id")
            if tr not in (0, 1) or ev not in (0, 1):
                raise CohortFormatError(subjects_path, line_no, "treatment/event must be 0 or 1")
            if fu < 0:
                raise CohortFormatError(subjects_path, line_no, "negative followup_time")
            subject_ids.append(sid)
            treatment.append(tr)
            followup.append(fu)
            event.append(ev)

    subject_ids = np.array(subject_ids, dtype=np.int64)
    id_to_row = {int(s): i for i, s in enumerate(subject_ids)}
    if len(id_to_row) != len(subject_ids):
        raise CohortFormatError(subjects_path, 1, "duplicate subject ids")

    pairs = []
    with open(covariates_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "covariate_id"]:
            raise CohortFormatError(covariates_path, 1, "bad covariate-file header")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise CohortFormatError(covariates_path, line_no, "expected 2 fields")
            try:
                sid = int(row[0])
                cid = int(row[1])
            except ValueError as exc:
                raise CohortFormatError(covariates_path, line_no, f"unparseable field: {exc}") from exc
            if cid < 0:
                raise CohortFormatError(covariates_path, line_no, "negative covariate id")
            if sid not in id_to_row:
                raise ReferentialIntegrityError(
                    f"{covariates_path}:{line_no}: subject {sid} not in subject file"
                )
            pairs.append((id_to_row[sid], cid))

    covariate_ids = np.array(sorted({cid for _, cid in pairs}), dtype=np.int64)
    cid_to_col = {int(c): j for j, c in enumerate(covariate_ids)}
    rows = np.array([r for r, _ in pairs], dtype=np.int64)
    cols = np.array([cid_to_col[c] for _, c in pairs], dtype=np.int64)
    X = sparse.csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)),
        shape=(len(subject_ids), len(covariate_ids)),
    )
    X.sum_duplicates()
    X.data[:] = 1

    followup = np.array(followup)
    if t_max is None:
        t_max = float(followup.max()) if len(followup) else 0.0
    return Cohort(
        subject_ids=subject_ids,
        treatment=np.array(treatment, dtype=np.int8),
        covariates=X,
        covariate_ids=covariate_ids,
        followup_time=followup,
        event=np.array(event, dtype=np.int8),
        t_max=t_max,
    )
