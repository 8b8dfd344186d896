//! Propensity-score experimentation engine for claims-style cohorts.
//!
//! The pipeline runs from a synthetic (or loaded) cohort through
//! L1-regularized propensity and outcome models, covariate-set strategies
//! with optional simulated instruments, plasmode outcome simulation,
//! variable-ratio caliper matching and stratified Cox estimation, to
//! negative-control empirical-null fitting and balance diagnostics.

pub mod cohort;
pub mod cox;
pub mod design;
pub mod error;
pub mod experiment;
pub mod glm;
pub mod matching;
pub mod metrics;
pub mod plasmode;
pub mod ps;

pub use cohort::{
    covariate_prevalence, generate_cohort, generate_cohort_with_truth, load_cohort, load_cohort_with_horizon,
    save_cohort, Cohort, CovariateId, GeneratorConfig, GroundTruth, SubjectId,
};
pub use cox::{
    breslow_baseline, cox_lambda_max, cross_validate_cox_lambda, fit_cox_l1, fit_cox_stratified, CoxModel,
    CoxOptions, EstimationResult, EventFlavor, StepFunction,
};
pub use design::{CvConfig, CvResult, SolverConfig};
pub use error::{Error, Result};
pub use glm::{cross_validate_lambda, fit_logistic_l1, lambda_max, predict_proba, FittedModel};
pub use matching::{
    match_diagnostics, match_variable_ratio, match_with_ids, CaliperScale, MatchConfig, MatchDiagnostics, MatchResult,
    Stratum,
};
pub use metrics::{
    balance_table, bias_summary, coverage, fit_empirical_null, smd, BalanceRow, BalanceTable, BiasSummary,
    NullDistribution,
};
pub use plasmode::{fit_generating_model, invert_cum_hazard, simulate_outcomes, GeneratingModel, SimulatedOutcomes};
pub use ps::{
    cox_nonzero_set, equipoise_fraction, estimate_ps, hdps_screen, inject_iv, preference_score, select_all,
    CovariateSet, IvDirection, IvSpec, StrategyTag,
};
pub use experiment::{
    emit_plot_data, study_model_grid, full_study_config, run_experiment, ExperimentConfig, ExperimentReport,
    ModelSpec, Strategy,
};
