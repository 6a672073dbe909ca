"""Propensity-score model experimentation engine.

Regularized PS and outcome fits, prevalence/relative-risk covariate
screening, simulated-instrument injection, plasmode survival simulation,
variable-ratio matching, stratified Cox estimation, and negative-control
empirical-null calibration over synthetic claims-style cohorts.
"""

from .calibration import (
    BalanceRow,
    BiasSummary,
    NullDistribution,
    balance_table,
    bias_summary,
    coverage,
    fit_empirical_null,
    smd,
)
from .cohort import (
    Cohort,
    GeneratorConfig,
    covariate_prevalence,
    generate_cohort,
    load_cohort,
    save_cohort,
)
from .coxph import (
    CoxModel,
    EstimationResult,
    StepFunction,
    breslow_baseline,
    cross_validate_cox_lambda,
    fit_cox_l1,
    fit_cox_stratified,
    lambda_max_cox,
)
from .errors import PsbenchError
from .experiment import ExperimentConfig, ModelSpec, emit_plot_data, run_experiment
from .logistic import (
    FittedModel,
    cross_validate_lambda,
    fit_logistic_l1,
    lambda_max,
    predict_proba,
)
from .matching import MatchResult, match_diagnostics, match_variable_ratio
from .pipeline import (
    CovariateSet,
    IvSpec,
    cox_nonzero_set,
    equipoise_fraction,
    estimate_ps,
    hdps_screen,
    inject_iv,
    preference_score,
    select_all,
)
from .plasmode import (
    GeneratingModel,
    SimulatedOutcomes,
    fit_generating_model,
    invert_cum_hazard,
    simulate_outcomes,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
