"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The scaled-down pattern criteria (4-7) share one module-scoped scenario:
5,000 subjects, 200 covariates, 20 systematic confounders, and an
All-Covariates propensity model chosen by cross-validation.
"""

import time

import numpy as np
import pytest

import psbench as pb
from psbench.cohort import GeneratorConfig
from psbench.errors import NoOverlapError
from psbench.experiment import (
    ExperimentConfig,
    _estimate_on_strata,
    cell_seed,
    make_negative_control_model,
)
from psbench.logistic import dense_design
from psbench.matching import match_variable_ratio
from psbench.pipeline import CovariateSet, IvSpec, preference_score

from conftest import (
    cox_partial_loglik,
    grid_maximize,
    make_cohort,
    newton_logistic,
)


@pytest.fixture
def report(capsys):
    def _report(criterion, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return _report


# --------------------------------------------------------------------------
# shared scenario for criteria 4-7: confounded cohort, All-Covariates model
# --------------------------------------------------------------------------

N_REPLICATES = 100
TRUE_HR = 4.0
CV_KW = dict(n_folds=5, grid_size=12)


@pytest.fixture(scope="module")
def scenario():
    cfg = GeneratorConfig(
        n_treated=1250,
        n_comparator=3750,
        n_covariates=200,
        n_confounders=20,
        prevalence_range=(0.02, 0.3),
        treatment_coef_scale=1.0,
        outcome_coef_scale=0.7,
        baseline_hazard_rate=0.001,
        censor_rate=0.0005,
        t_max=365.0,
        seed=42,
    )
    cohort = pb.generate_cohort(cfg)
    all_set = pb.select_all(cohort)
    gm = pb.fit_generating_model(cohort, all_set, 0.01, 0.01)
    ps, model = pb.estimate_ps(cohort, all_set, cv_seed=1, **CV_KW)
    match = match_variable_ratio(ps, cohort.treatment)
    return {"cohort": cohort, "all_set": all_set, "gm": gm,
            "ps": ps, "model": model, "match": match}


def sim_seed(r):
    return cell_seed(1, 2, 0, 0, r)


@pytest.fixture(scope="module")
def replicate_estimates(scenario):
    """Unadjusted and All-Covariates estimates on shared simulated outcomes."""
    co, gm, match = scenario["cohort"], scenario["gm"], scenario["match"]
    unadj, adj = [], []
    for r in range(N_REPLICATES):
        sim = pb.simulate_outcomes(gm, co, TRUE_HR, sim_seed(r))
        unadj.append(_estimate_on_strata(co, sim, None, True))
        adj.append(_estimate_on_strata(co, sim, match, False))
    return unadj, adj


@pytest.fixture(scope="module")
def iv_replicates(scenario):
    """Per-replicate IV re-injection into the All-Covariates model."""
    co, gm, all_set = scenario["cohort"], scenario["gm"], scenario["all_set"]
    records = []
    for r in range(N_REPLICATES):
        iv_spec = IvSpec(prevalence=0.1, rr=4.0, seed=cell_seed(1, 1, 0, r))
        co_iv, iv_id = pb.inject_iv(co, iv_spec)
        cs = CovariateSet(ids=tuple(all_set.ids) + (iv_id,),
                          strategy_tag="all")
        ps, model = pb.estimate_ps(co_iv, cs, cv_seed=cell_seed(1, 5, r), **CV_KW)
        match = match_variable_ratio(ps, co_iv.treatment)
        sim = pb.simulate_outcomes(gm, co, TRUE_HR, sim_seed(r))
        est = _estimate_on_strata(co, sim, match, False)
        rows, _ = pb.balance_table(co_iv, cs, match)
        records.append({
            "iv_coef": model.coefficients.get(iv_id, 0.0),
            "estimate": est,
            "smd_after": np.array([b.smd_after for b in rows]),
        })
    return records


def mean_bias(estimates):
    vals = [e.log_hr for e in estimates if e.converged]
    return float(np.mean(vals) - np.log(TRUE_HR))


# --------------------------------------------------------------------------


def test_criterion_1_solver_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1001)
    co = make_cohort(rng, n=50, m=5)

    # L1 logistic at lambda 0 vs Newton-Raphson MLE
    model = pb.fit_logistic_l1(co, co.covariate_ids, co.treatment, 0.0)
    X = dense_design(co, co.covariate_ids)
    b0, beta = newton_logistic(X, co.treatment.astype(float))
    got = np.array([model.coefficients.get(int(c), 0.0) for c in co.covariate_ids])
    logistic_err = max(abs(model.intercept - b0), float(np.max(np.abs(got - beta))))

    # Cox partial-likelihood gradient vs central finite differences
    from psbench._kernels import cox_risk_quantities

    xg = rng.normal(size=(60, 4))
    tg = rng.uniform(1, 40, 60)
    eg = (rng.random(60) < 0.6).astype(np.int8)
    eg[0] = 1
    order = np.argsort(tg, kind="stable").astype(np.int64)
    bg = np.array([0.2, -0.4, 0.1, 0.05])

    def negll(b):
        return cox_risk_quantities(xg @ b, order, tg, eg)[2]

    _, mart, _ = cox_risk_quantities(xg @ bg, order, tg, eg)
    analytic = -xg.T @ mart
    h = 1e-5
    grad_err = 0.0
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        fd = (negll(bg + e) - negll(bg - e)) / (2 * h)
        grad_err = max(grad_err, abs(fd - analytic[j]) / max(1.0, abs(fd)))

    # lambda >= lambda_max collapses every penalized coefficient
    lmax_log = pb.lambda_max(co, co.covariate_ids, co.treatment)
    at_max = pb.fit_logistic_l1(co, co.covariate_ids, co.treatment, 1.01 * lmax_log)
    lmax_cox = pb.lambda_max_cox(co, co.covariate_ids)
    cox_at_max = pb.fit_cox_l1(co, co.covariate_ids, 1.01 * lmax_cox)
    all_zero = at_max.n_nonzero == 0 and cox_at_max.coefficients == {}

    elapsed = time.perf_counter() - t0
    ok = logistic_err < 1e-6 and grad_err < 1e-6 and all_zero and elapsed < 10.0
    report(
        "criterion 1 solver oracles",
        ok,
        f"logistic err {logistic_err:.2e}, grad err {grad_err:.2e}, "
        f"all-zero at lambda_max {all_zero}, {elapsed:.1f}s",
    )


def test_criterion_2_stratified_cox_oracle(report):
    rng = np.random.default_rng(1002)
    worst = 0.0
    worst_ratio = 0.0
    done = 0
    while done < 10:
        z = np.zeros(5)
        z[rng.choice(5, size=int(rng.integers(1, 5)), replace=False)] = 1.0
        t = rng.uniform(1, 20, 5)
        e = (rng.random(5) < 0.7).astype(np.int8)
        if e.sum() == 0 or len(np.unique(z)) < 2:
            continue
        res = pb.fit_cox_stratified(t, e, z, np.zeros(5))
        if not res.converged:
            continue  # monotone-likelihood draw: no interior optimum to compare
        best = grid_maximize(lambda b: cox_partial_loglik(b, z[:, None], t, e),
                             lo=-35.0, hi=35.0)
        worst = max(worst, abs(res.log_hr - best))

        # duplicating the stratum doubles information: se shrinks by sqrt 2
        res2 = pb.fit_cox_stratified(
            np.tile(t, 2), np.tile(e, 2), np.tile(z, 2),
            np.repeat([0, 1], 5),
        )
        worst_ratio = max(worst_ratio, abs(res.se / res2.se - np.sqrt(2.0)))
        done += 1
    ok = worst < 1e-6 and worst_ratio < 1e-6
    report(
        "criterion 2 stratified Cox oracle",
        ok,
        f"max |log_hr - grid| {worst:.2e}, max |se ratio - sqrt2| {worst_ratio:.2e}",
    )


def test_criterion_3_plasmode_consistency(report):
    cfg = GeneratorConfig(
        n_treated=2500, n_comparator=7500, n_covariates=0,
        baseline_hazard_rate=0.002, censor_rate=0.0005, t_max=365.0, seed=1003,
    )
    co = pb.generate_cohort(cfg)
    gm = pb.fit_generating_model(co, (), 0.0, 0.0)
    fractions = {}
    for hr in (1.0, 2.0, 4.0):
        hits = 0
        for r in range(100):
            sim = pb.simulate_outcomes(gm, co, hr, cell_seed(1003, int(hr * 10), r))
            res = _estimate_on_strata(co, sim, None, True)
            if res.converged and abs(res.log_hr - np.log(hr)) <= 3 * res.se:
                hits += 1
        fractions[hr] = hits / 100
    ok = all(f >= 0.95 for f in fractions.values())
    report(
        "criterion 3 plasmode consistency",
        ok,
        "within 3 SE: " + ", ".join(f"HR {hr:g}: {f:.0%}" for hr, f in fractions.items()),
    )


def test_criterion_4_confounding_control_pattern(report, replicate_estimates):
    unadj, adj = replicate_estimates
    mb_u, mb_a = mean_bias(unadj), mean_bias(adj)
    good = [e for e in adj if e.converged]
    cov = pb.coverage([e.log_hr for e in good], [e.se for e in good], TRUE_HR)
    ok = abs(mb_u) >= 3 * abs(mb_a) and cov >= 0.90
    report(
        "criterion 4 confounding-control pattern",
        ok,
        f"unadjusted bias {mb_u:+.3f}, adjusted bias {mb_a:+.3f} "
        f"(ratio {abs(mb_u) / abs(mb_a):.1f}), coverage {cov:.2f}",
    )


def test_criterion_5_iv_weak_effect(report, replicate_estimates, iv_replicates):
    _, adj = replicate_estimates
    mb_adj = mean_bias(adj)
    mb_iv = mean_bias([r["estimate"] for r in iv_replicates])
    delta = abs(abs(mb_iv) - abs(mb_adj))
    smds = np.concatenate([r["smd_after"] for r in iv_replicates])
    frac_balanced = float(np.mean(np.abs(smds) < 0.1))
    ok = delta < 0.05 and frac_balanced >= 0.95
    report(
        "criterion 5 IV weak effect on bias",
        ok,
        f"|mean bias| shift {delta:.3f} (no-IV {mb_adj:+.3f}, IV {mb_iv:+.3f}), "
        f"{frac_balanced:.1%} of post-matching SMDs below 0.1",
    )


def test_criterion_6_iv_always_in_ps(report, iv_replicates):
    coefs = np.array([r["iv_coef"] for r in iv_replicates])
    n_nonzero = int(np.sum(coefs != 0.0))
    ok = n_nonzero == len(coefs)
    report(
        "criterion 6 IV captured by PS",
        ok,
        f"nonzero IV coefficient in {n_nonzero}/{len(coefs)} replicates "
        f"(median {np.median(coefs):.2f})",
    )


def test_criterion_7_empirical_null(report, scenario):
    # synthetic recovery
    rng = np.random.default_rng(1007)
    mu, sigma = 0.1, 0.2
    tau = rng.uniform(0.05, 0.15, size=2000)
    est = rng.normal(mu, np.sqrt(sigma**2 + tau**2))
    nd = pb.fit_empirical_null(est, tau)
    recovery_ok = abs(nd.mu - mu) < 0.02 and abs(nd.sigma - sigma) < 0.02

    # 49 negative controls, no unmeasured confounding, All-Covariates model
    co, gm, match = scenario["cohort"], scenario["gm"], scenario["match"]
    lhs, ses = [], []
    for c in range(49):
        nc_model = make_negative_control_model(gm, co.covariate_ids,
                                               cell_seed(7, 3, c))
        gm_c = pb.GeneratingModel(
            outcome_model=nc_model,
            censor_model=gm.censor_model,
            outcome_baseline=gm.outcome_baseline,
            censor_baseline=gm.censor_baseline,
            t_max=gm.t_max,
        )
        sim = pb.simulate_outcomes(gm_c, co, 1.0, cell_seed(7, 4, c))
        e = _estimate_on_strata(co, sim, match, False)
        if e.converged:
            lhs.append(e.log_hr)
            ses.append(e.se)
    null = pb.fit_empirical_null(lhs, ses)
    nc_ok = abs(null.mu) < 0.05 and null.sigma < 0.10

    ok = recovery_ok and nc_ok
    report(
        "criterion 7 empirical-null recovery",
        ok,
        f"synthetic (mu {nd.mu:.3f}, sigma {nd.sigma:.3f}); "
        f"{len(lhs)} controls -> mu {null.mu:+.3f}, sigma {null.sigma:.3f}",
    )


def test_criterion_8_matching_contracts(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1008)
    calipers = (0.1, 0.2, 0.5)
    checked = 0
    trial = 0
    while checked < 1000:
        trial += 1
        n = int(rng.integers(10, 70))
        ps = rng.random(n)
        z = (rng.random(n) < 0.35).astype(np.int8)
        if not (0 < z.sum() < n):
            continue
        scores = np.log(np.clip(ps, 1e-12, 1 - 1e-12)
                        / (1 - np.clip(ps, 1e-12, 1 - 1e-12)))
        matched_counts = []
        for cal in calipers:
            try:
                res = match_variable_ratio(ps, z, caliper=cal)
            except NoOverlapError:
                matched_counts.append(0)
                continue
            matched_counts.append(res.n_matched_treated)
            seen = set()
            for treated_id, comps in res.strata:
                assert z[treated_id] == 1
                assert 1 <= len(comps) <= 10
                for c in comps:
                    assert z[c] == 0
                    assert c not in seen
                    seen.add(c)
                    assert abs(scores[treated_id] - scores[c]) \
                        <= res.caliper_width_logit + 1e-12
        # a wider caliper never matches fewer treated subjects
        assert matched_counts == sorted(matched_counts)
        checked += 1
    elapsed = time.perf_counter() - t0
    ok = elapsed < 30.0
    report(
        "criterion 8 matching contracts",
        ok,
        f"{checked} randomized instances (caliper, reuse, ratio, monotonicity) "
        f"in {elapsed:.1f}s",
    )


def test_criterion_9_preference_score_identities(report):
    s = np.linspace(0.001, 0.999, 499)
    err_indifference = max(
        float(np.max(np.abs(preference_score(np.full(9, p), p) - 0.5)))
        for p in np.linspace(0.05, 0.95, 9)
    )
    err_identity = float(np.max(np.abs(preference_score(s, 0.5) - s)))
    monotone = all(
        bool(np.all(np.diff(preference_score(s, p)) > 0))
        for p in (0.1, 0.5, 0.9)
    )
    ok = err_indifference < 1e-12 and err_identity < 1e-12 and monotone
    report(
        "criterion 9 preference-score identities",
        ok,
        f"S=P err {err_indifference:.1e}, P=0.5 err {err_identity:.1e}, "
        f"strictly monotone {monotone}",
    )


def test_criterion_10_determinism(report, tmp_path):
    import dataclasses

    spec = {
        "generator": {
            "n_treated": 60, "n_comparator": 180, "n_covariates": 25,
            "n_confounders": 5, "prevalence_range": [0.05, 0.4], "seed": 17,
        },
        "ps_models": [
            {"name": "unadjusted", "strategy": "unadjusted"},
            {"name": "all", "strategy": "all"},
            {"name": "all_iv", "strategy": "all",
             "iv": {"prevalence": 0.1, "rr": 4.0}},
        ],
        "true_hrs": [1.0, 2.0],
        "n_replicates": 2,
        "n_negative_controls": 4,
        "cv": {"n_folds": 3, "grid_size": 5},
        "lambda_outcome": 0.05,
        "lambda_censor": 0.05,
        "seed": 17,
        "output_dir": str(tmp_path / "a"),
    }
    cfg = ExperimentConfig.from_dict(spec)
    pb.run_experiment(cfg)
    pb.run_experiment(dataclasses.replace(cfg, output_dir=str(tmp_path / "b")))

    diffs = []
    import os

    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            if not f.endswith(".csv"):
                continue
            rel = os.path.relpath(os.path.join(root, f), tmp_path / "a")
            a = open(os.path.join(tmp_path, "a", rel), "rb").read()
            b = open(os.path.join(tmp_path, "b", rel), "rb").read()
            if a != b:
                diffs.append(rel)
    n_csv = sum(f.endswith(".csv") for f in os.listdir(tmp_path / "a"))
    ok = not diffs and n_csv > 0
    report(
        "criterion 10 determinism",
        ok,
        f"{n_csv} CSV files byte-identical across reruns"
        + (f"; differing: {diffs}" if diffs else ""),
    )
