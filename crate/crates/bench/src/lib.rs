//! Shared fixtures for the solver benchmarks.

use ivps_core::{generate_cohort, Cohort, GeneratorConfig};

pub fn bench_config(n_treated: usize, n_comparator: usize, n_covariates: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_treated,
        n_comparator,
        n_covariates,
        prevalence_range: (0.01, 0.5),
        n_confounders: n_covariates / 10,
        treatment_coef_scale: 0.4,
        outcome_coef_scale: 0.4,
        baseline_hazard_rate: 0.0005,
        censor_rate: 0.0005,
        t_max: 1000.0,
        seed,
        n_treatment_only: 0,
        n_outcome_only: 0,
        treatment_log_hr: 0.0,
        n_age_bins: 0,
        age_treatment_effect: 0.0,
        age_outcome_effect: 0.0,
        n_year_indicators: 0,
        year_treatment_effect: 0.0,
    }
}

pub fn bench_cohort(n_treated: usize, n_comparator: usize, n_covariates: usize) -> Cohort {
    generate_cohort(&bench_config(n_treated, n_comparator, n_covariates, 7)).expect("valid bench config")
}
