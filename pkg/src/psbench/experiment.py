"""End-to-end experiment orchestration.

Reproduces the study grid from a single JSON config: build each PS model
variant (all covariates / exclusions / prevalence-RR screen / outcome-model
nonzero set, with or without an injected instrument), simulate outcomes
under each true hazard ratio, estimate via matched stratified Cox, run the
negative-control batch, and write a self-describing report bundle.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import calibration, matching, pipeline, plasmode
from .cohort import Cohort, GeneratorConfig, generate_cohort, save_cohort
from .coxph import (
    CoxModel,
    EstimationResult,
    cross_validate_cox_lambda,
    fit_cox_stratified,
)
from .errors import ConfigurationError, PsbenchError
from .pipeline import CovariateSet, IvSpec

# phase codes for the deterministic seed schedule
_PH_IV = 1
_PH_SIM = 2
_PH_NC_MODEL = 3
_PH_NC_SIM = 4
_PH_CV = 5
_PH_NC_IV = 6


def cell_seed(master: int, *key: int) -> int:
    """Deterministic per-cell seed; a pure function of (master, key)."""
    ss = np.random.SeedSequence(entropy=master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ModelSpec:
    """One PS model variant of the study grid."""

    name: str
    strategy: str                  # unadjusted | all | hdps | cox
    exclude: tuple = ()
    iv: IvSpec | None = None       # iv.seed is ignored; per-replicate seeds are derived

    def __post_init__(self):
        if self.strategy not in ("unadjusted", "all", "hdps", "cox"):
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "unadjusted" and self.iv is not None:
            raise ConfigurationError("unadjusted model cannot carry an IV")


@dataclass(frozen=True)
class MatchSettings:
    max_ratio: int = 10
    caliper: float = 0.2
    caliper_scale: str = "sd_logit"


@dataclass(frozen=True)
class CvSettings:
    n_folds: int = 10
    grid_size: int = 20
    grid_floor_ratio: float = 1e-3


@dataclass(frozen=True)
class HdpsSettings:
    n_prevalent: int = 500
    n_select: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig
    ps_models: tuple
    true_hrs: tuple = (1.0, 1.5, 2.0, 4.0)
    n_replicates: int = 100
    n_negative_controls: int = 49
    match: MatchSettings = field(default_factory=MatchSettings)
    cv: CvSettings = field(default_factory=CvSettings)
    hdps: HdpsSettings = field(default_factory=HdpsSettings)
    lambda_outcome: float | str = "cv"   # a number, or "cv" to cross-validate
    lambda_censor: float | str = "cv"
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ConfigurationError("n_replicates must be >= 1")
        names = [m.name for m in self.ps_models]
        if len(set(names)) != len(names):
            raise ConfigurationError("ps_models names must be unique")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        models = []
        for i, m in enumerate(d.get("ps_models", [])):
            iv = m.get("iv")
            models.append(
                ModelSpec(
                    name=m.get("name", f"model_{i}"),
                    strategy=m["strategy"],
                    exclude=tuple(m.get("exclude", [])),
                    iv=IvSpec(prevalence=iv["prevalence"], rr=iv["rr"]) if iv else None,
                )
            )
        return cls(
            generator=GeneratorConfig(**d["generator"]),
            ps_models=tuple(models),
            true_hrs=tuple(d.get("true_hrs", (1.0, 1.5, 2.0, 4.0))),
            n_replicates=int(d.get("n_replicates", 100)),
            n_negative_controls=int(d.get("n_negative_controls", 49)),
            match=MatchSettings(**d.get("match", {})),
            cv=CvSettings(**d.get("cv", {})),
            hdps=HdpsSettings(**d.get("hdps", {})),
            lambda_outcome=d.get("lambda_outcome", "cv"),
            lambda_censor=d.get("lambda_censor", "cv"),
            seed=int(d.get("seed", 0)),
            output_dir=d.get("output_dir", "out"),
        )

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def canonical_json(self) -> str:
        def enc(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {k: enc(getattr(obj, k)) for k in obj.__dataclass_fields__}
            if isinstance(obj, (tuple, list)):
                return [enc(v) for v in obj]
            return obj

        d = enc(self)
        d.pop("output_dir", None)  # where a run lands does not change what it computes
        return json.dumps(d, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def build_covariate_set(
    cohort: Cohort, spec: ModelSpec, gm: plasmode.GeneratingModel, hdps: HdpsSettings
):
    if spec.strategy == "unadjusted":
        return None
    if spec.strategy == "all":
        return pipeline.select_all(cohort, exclude=spec.exclude)
    if spec.strategy == "hdps":
        return pipeline.hdps_screen(cohort, hdps.n_prevalent, hdps.n_select)
    if spec.strategy == "cox":
        return pipeline.cox_nonzero_set(gm.outcome_model)
    raise ConfigurationError(f"unknown strategy {spec.strategy!r}")


def _resolve_lambda(value, cohort, covariate_set, event_flavor, cv: CvSettings, seed):
    if value == "cv":
        return cross_validate_cox_lambda(
            cohort,
            covariate_set,
            n_folds=cv.n_folds,
            seed=seed,
            grid_size=cv.grid_size,
            grid_floor_ratio=cv.grid_floor_ratio,
            event_flavor=event_flavor,
        )
    return float(value)


def make_negative_control_model(
    gm: plasmode.GeneratingModel, covariate_ids, seed: int
) -> CoxModel:
    """Synthetic null-effect outcome model: the fitted outcome coefficients
    reassigned to a fresh random covariate subset, treatment effect zero."""
    rng = np.random.default_rng(seed)
    values = np.array([v for v in gm.outcome_model.coefficients.values()])
    pool = np.asarray(covariate_ids, dtype=np.int64)
    k = min(len(values), len(pool))
    if k > 0:
        ids = rng.choice(pool, size=k, replace=False)
        values = rng.permutation(values)[:k]
        coefs = {int(c): float(v) for c, v in zip(ids, values)}
    else:
        coefs = {}
    return CoxModel(
        coefficients=coefs,
        lam=gm.outcome_model.lam,
        includes_treatment=True,
        treatment_coef=0.0,
        event_flavor="outcome",
    )


def _estimate_on_strata(cohort: Cohort, sim, match_result, unadjusted: bool):
    if unadjusted:
        strata = np.zeros(cohort.n_subjects, dtype=np.int64)
        return fit_cox_stratified(sim.followup_time, sim.event, cohort.treatment, strata)
    row_of = {int(s): i for i, s in enumerate(cohort.subject_ids)}
    sids, strat, _ = match_result.subject_strata()
    rows = np.array([row_of[int(s)] for s in sids], dtype=np.int64)
    return fit_cox_stratified(
        sim.followup_time[rows], sim.event[rows], cohort.treatment[rows], strat
    )


@dataclass
class _FittedSpec:
    """Per-model state carried through the run."""

    spec: ModelSpec
    covariate_set: object = None
    ps: np.ndarray | None = None
    ps_model: object = None
    match: matching.MatchResult | None = None
    iv_cohort: Cohort | None = None
    iv_id: int | None = None


def _fit_spec_once(cohort, spec, gm, cfg, model_index, iv_seed_key=None) -> _FittedSpec:
    """Build the covariate set, (re)inject the IV if any, fit the PS, match."""
    st = _FittedSpec(spec=spec)
    if spec.strategy == "unadjusted":
        return st
    base_set = build_covariate_set(cohort, spec, gm, cfg.hdps)
    work_cohort = cohort
    if spec.iv is not None:
        iv_spec = IvSpec(
            prevalence=spec.iv.prevalence,
            rr=spec.iv.rr,
            seed=cell_seed(cfg.seed, *iv_seed_key),
        )
        work_cohort, iv_id = pipeline.inject_iv(cohort, iv_spec)
        st.iv_cohort = work_cohort
        st.iv_id = iv_id
        base_set = CovariateSet(
            ids=tuple(base_set.ids) + (iv_id,), strategy_tag=base_set.strategy_tag
        )
    st.covariate_set = base_set
    cv_seed = cell_seed(cfg.seed, _PH_CV, model_index)
    st.ps, st.ps_model = pipeline.estimate_ps(
        work_cohort,
        base_set,
        cv_seed=cv_seed,
        n_folds=cfg.cv.n_folds,
        grid_size=cfg.cv.grid_size,
        grid_floor_ratio=cfg.cv.grid_floor_ratio,
    )
    st.match = matching.match_variable_ratio(
        st.ps,
        work_cohort.treatment,
        max_ratio=cfg.match.max_ratio,
        caliper=cfg.match.caliper,
        caliper_scale=cfg.match.caliper_scale,
        subject_ids=work_cohort.subject_ids,
    )
    return st


def run_experiment(config: ExperimentConfig, threads: int = 1) -> str:
    """Execute the full grid and write the report bundle; returns output_dir."""
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    artifacts = []

    cohort = generate_cohort(config.generator)
    save_cohort(cohort, os.path.join(out, "subjects.csv"), os.path.join(out, "covariates.csv"))
    artifacts += ["subjects.csv", "covariates.csv"]

    all_set = pipeline.select_all(cohort)
    lam_out = _resolve_lambda(
        config.lambda_outcome, cohort, all_set, "outcome", config.cv, cell_seed(config.seed, 90)
    )
    lam_cens = _resolve_lambda(
        config.lambda_censor, cohort, all_set, "censoring", config.cv, cell_seed(config.seed, 91)
    )
    gm = plasmode.fit_generating_model(cohort, all_set, lam_out, lam_cens)

    estimate_rows = []   # (model, hr, replicate, EstimationResult)
    error_rows = []      # (model, hr, replicate, message)
    fitted_once = {}     # model name -> _FittedSpec for reporting (replicate 0 for IV models)

    for mi, spec in enumerate(config.ps_models):
        if spec.iv is None:
            try:
                st = _fit_spec_once(cohort, spec, gm, config, mi)
            except PsbenchError as exc:
                error_rows.append((spec.name, "", "", f"model build failed: {exc}"))
                continue
            fitted_once[spec.name] = st

            def run_cell(args, st=st, spec=spec):
                hi, r = args
                hr = config.true_hrs[hi]
                seed = cell_seed(config.seed, _PH_SIM, mi, hi, r)
                sim = plasmode.simulate_outcomes(gm, cohort, hr, seed)
                return _estimate_on_strata(cohort, sim, st.match, spec.strategy == "unadjusted")

            cells = [(hi, r) for hi in range(len(config.true_hrs)) for r in range(config.n_replicates)]
            results = _map_cells(run_cell, cells, threads)
            for (hi, r), res in zip(cells, results):
                if isinstance(res, Exception):
                    error_rows.append((spec.name, config.true_hrs[hi], r, str(res)))
                else:
                    estimate_rows.append((spec.name, config.true_hrs[hi], r, res))
        else:
            def run_replicate(r, spec=spec, mi=mi):
                st = _fit_spec_once(cohort, spec, gm, config, mi, iv_seed_key=(_PH_IV, mi, r))
                out_rows = []
                for hi, hr in enumerate(config.true_hrs):
                    seed = cell_seed(config.seed, _PH_SIM, mi, hi, r)
                    sim = plasmode.simulate_outcomes(gm, cohort, hr, seed)
                    res = _estimate_on_strata(cohort, sim, st.match, False)
                    out_rows.append((hi, res))
                return st, out_rows

            reps = list(range(config.n_replicates))
            results = _map_cells(run_replicate, reps, threads)
            for r, res in zip(reps, results):
                if isinstance(res, Exception):
                    error_rows.append((spec.name, "", r, str(res)))
                    continue
                st, out_rows = res
                if r == 0:
                    fitted_once[spec.name] = st
                for hi, est in out_rows:
                    estimate_rows.append((spec.name, config.true_hrs[hi], r, est))

    # --- negative controls -------------------------------------------------
    nc_rows = []        # (model, control, EstimationResult)
    null_fits = {}
    if config.n_negative_controls >= 2:
        controls = []
        for c in range(config.n_negative_controls):
            model_c = make_negative_control_model(
                gm, cohort.covariate_ids, cell_seed(config.seed, _PH_NC_MODEL, c)
            )
            gm_c = plasmode.GeneratingModel(
                outcome_model=model_c,
                censor_model=gm.censor_model,
                outcome_baseline=gm.outcome_baseline,
                censor_baseline=gm.censor_baseline,
                t_max=gm.t_max,
            )
            sim_c = plasmode.simulate_outcomes(
                gm_c, cohort, 1.0, cell_seed(config.seed, _PH_NC_SIM, c)
            )
            controls.append(sim_c)

        for mi, spec in enumerate(config.ps_models):
            if spec.strategy == "unadjusted":
                st = _FittedSpec(spec=spec)
            elif spec.iv is None:
                st = fitted_once.get(spec.name)
            else:
                try:
                    st = _fit_spec_once(
                        cohort, spec, gm, config, mi, iv_seed_key=(_PH_NC_IV, mi)
                    )
                except PsbenchError as exc:
                    error_rows.append((spec.name, "nc", "", str(exc)))
                    continue
            if st is None:
                continue
            ests = []
            for c, sim_c in enumerate(controls):
                try:
                    res = _estimate_on_strata(
                        cohort, sim_c, st.match, spec.strategy == "unadjusted"
                    )
                except PsbenchError as exc:
                    error_rows.append((spec.name, "nc", c, str(exc)))
                    continue
                nc_rows.append((spec.name, c, res))
                ests.append(res)
            good = [e for e in ests if e.converged]
            if len(good) >= 2:
                null_fits[spec.name] = calibration.fit_empirical_null(
                    [e.log_hr for e in good], [e.se for e in good]
                )

    # --- report bundle -----------------------------------------------------
    artifacts += _write_reports(
        out, config, cohort, fitted_once, estimate_rows, error_rows, nc_rows, null_fits
    )
    manifest = {
        "config_hash": config.config_hash(),
        "artifacts": sorted(artifacts),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out


def _map_cells(fn, items, threads):
    """Run fn over items (serially or thread-pooled), capturing exceptions."""

    def guarded(item):
        try:
            return fn(item)
        except Exception as exc:  # cell isolation: a failure must not abort the run
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(guarded, items))
    return [guarded(item) for item in items]


def _write_reports(out, config, cohort, fitted_once, estimate_rows, error_rows, nc_rows, null_fits):
    artifacts = []

    path = os.path.join(out, "estimates.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "true_hr", "replicate", "log_hr", "se", "ci_low", "ci_high", "converged"])
        for model, hr, r, e in estimate_rows:
            w.writerow(
                [model, repr(float(hr)), r, repr(e.log_hr), repr(e.se), repr(e.ci_low),
                 repr(e.ci_high), int(e.converged)]
            )
    artifacts.append("estimates.csv")

    path = os.path.join(out, "bias_summary.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "true_hr", "mean_bias", "sd", "n_converged", "n_nonconverged"])
        for spec in config.ps_models:
            for hr in config.true_hrs:
                ests = [e for m, h, _, e in estimate_rows if m == spec.name and h == hr]
                if not any(e.converged for e in ests):
                    continue
                s = calibration.bias_summary(ests, hr)
                w.writerow(
                    [spec.name, repr(float(hr)), repr(s.mean_bias), repr(s.sd),
                     s.n_converged, s.n_nonconverged]
                )
    artifacts.append("bias_summary.csv")

    path = os.path.join(out, "coverage.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "true_hr", "coverage", "n"])
        for spec in config.ps_models:
            for hr in config.true_hrs:
                ests = [e for m, h, _, e in estimate_rows if m == spec.name and h == hr and e.converged]
                if not ests:
                    continue
                cov = calibration.coverage([e.log_hr for e in ests], [e.se for e in ests], hr)
                w.writerow([spec.name, repr(float(hr)), repr(cov), len(ests)])
    artifacts.append("coverage.csv")

    path = os.path.join(out, "nc_estimates.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "control", "log_hr", "se", "ci_low", "ci_high", "converged"])
        for model, c, e in nc_rows:
            w.writerow(
                [model, c, repr(e.log_hr), repr(e.se), repr(e.ci_low), repr(e.ci_high),
                 int(e.converged)]
            )
    artifacts.append("nc_estimates.csv")

    with open(os.path.join(out, "null_distributions.json"), "w") as fh:
        json.dump(
            {
                name: {
                    "mu": nd.mu,
                    "sigma": nd.sigma,
                    "n_controls": nd.n_controls,
                    "log_likelihood": nd.log_likelihood,
                }
                for name, nd in sorted(null_fits.items())
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    artifacts.append("null_distributions.json")

    treated_fraction = float(np.mean(cohort.treatment == 1))
    for spec in config.ps_models:
        st = fitted_once.get(spec.name)
        if st is None or st.ps is None:
            continue
        safe = _safe_name(spec.name)
        work = st.iv_cohort if st.iv_cohort is not None else cohort
        pref = pipeline.preference_score(st.ps, treated_fraction)
        fname = f"ps_{safe}.csv"
        with open(os.path.join(out, fname), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "ps", "preference_score"])
            for sid, s, f in zip(work.subject_ids, st.ps, pref):
                w.writerow([int(sid), repr(float(s)), repr(float(f))])
        artifacts.append(fname)

        rows, n_cross = calibration.balance_table(work, st.covariate_set, st.match)
        fname = f"balance_{safe}.csv"
        calibration.save_balance_csv(rows, os.path.join(out, fname))
        artifacts.append(fname)

        fname = f"model_{safe}.json"
        with open(os.path.join(out, fname), "w") as fh:
            fh.write(st.ps_model.to_json())
        artifacts.append(fname)

    path = os.path.join(out, "errors.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "true_hr", "replicate", "message"])
        for row in error_rows:
            w.writerow(list(row))
    artifacts.append("errors.csv")

    return artifacts


def emit_plot_data(report_dir: str) -> str:
    """Derive plot-ready CSVs from a report bundle; returns the plots directory."""
    subjects_path = os.path.join(report_dir, "subjects.csv")
    if not os.path.exists(subjects_path):
        raise FileNotFoundError(f"no subjects.csv in {report_dir}; run the experiment first")
    plots = os.path.join(report_dir, "plots")
    os.makedirs(plots, exist_ok=True)

    arm_of = {}
    with open(subjects_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            arm_of[int(row["subject_id"])] = int(row["treatment"])

    # preference-score histograms per arm (20 bins over [0, 1])
    edges = np.linspace(0.0, 1.0, 21)
    with open(os.path.join(plots, "preference_hist.csv"), "w", newline="") as out_fh:
        w = csv.writer(out_fh)
        w.writerow(["model", "arm", "bin_low", "bin_high", "count"])
        for fname in sorted(os.listdir(report_dir)):
            if not (fname.startswith("ps_") and fname.endswith(".csv")):
                continue
            model = fname[3:-4]
            scores = {0: [], 1: []}
            with open(os.path.join(report_dir, fname), newline="") as fh:
                for row in csv.DictReader(fh):
                    sid = int(row["subject_id"])
                    if sid in arm_of:
                        scores[arm_of[sid]].append(float(row["preference_score"]))
            for arm in (0, 1):
                counts, _ = np.histogram(
                    np.clip(np.array(scores[arm]), 0.0, 1.0), bins=edges
                )
                for b in range(20):
                    w.writerow([model, arm, repr(float(edges[b])), repr(float(edges[b + 1])),
                                int(counts[b])])

    # bias vs SD table
    with open(os.path.join(report_dir, "bias_summary.csv"), newline="") as fh, open(
        os.path.join(plots, "bias_sd.csv"), "w", newline=""
    ) as out_fh:
        w = csv.writer(out_fh)
        w.writerow(["model", "true_hr", "mean_bias", "sd"])
        for row in csv.DictReader(fh):
            w.writerow([row["model"], row["true_hr"], row["mean_bias"], row["sd"]])

    # before/after SMD scatter rows
    with open(os.path.join(plots, "smd_scatter.csv"), "w", newline="") as out_fh:
        w = csv.writer(out_fh)
        w.writerow(["model", "covariate_id", "smd_before", "smd_after"])
        for fname in sorted(os.listdir(report_dir)):
            if not (fname.startswith("balance_") and fname.endswith(".csv")):
                continue
            model = fname[8:-4]
            with open(os.path.join(report_dir, fname), newline="") as fh:
                for row in csv.DictReader(fh):
                    w.writerow([model, row["covariate_id"], row["smd_before"], row["smd_after"]])

    # negative-control estimate strips with recomputed significance flags
    with open(os.path.join(report_dir, "nc_estimates.csv"), newline="") as fh, open(
        os.path.join(plots, "nc_strip.csv"), "w", newline=""
    ) as out_fh:
        w = csv.writer(out_fh)
        w.writerow(["model", "control", "log_hr", "se", "significant"])
        for row in csv.DictReader(fh):
            sig = int(float(row["ci_low"]) > 0.0 or float(row["ci_high"]) < 0.0)
            w.writerow([row["model"], row["control"], row["log_hr"], row["se"], sig])

    return plots
