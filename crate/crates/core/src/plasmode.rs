//! Plasmode outcome simulation over fixed covariate data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CovariateId};
use crate::cox::{breslow_baseline, fit_cox_l1, CoxModel, CoxOptions, EventFlavor, StepFunction};
use crate::design::SolverConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratingModel {
    pub outcome_model: CoxModel,
    pub censor_model: CoxModel,
    pub outcome_baseline: StepFunction,
    pub censor_baseline: StepFunction,
    pub t_max: f64,
}

impl GeneratingModel {
    /// Same censoring process, different outcome covariate coefficients.
    pub fn with_outcome_coefficients(&self, coefficients: std::collections::BTreeMap<CovariateId, f64>) -> Self {
        let mut gm = self.clone();
        gm.outcome_model.coefficients = coefficients;
        gm
    }
}

/// Outcome and censoring Cox models (treatment unpenalized in both) with
/// their Breslow baselines.
pub fn fit_generating_model(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    lambda_outcome: f64,
    lambda_censor: f64,
    solver: &SolverConfig,
) -> Result<GeneratingModel> {
    if cohort.event().iter().all(|&e| e) {
        return Err(Error::Config("generating model needs at least one censored subject".into()));
    }
    let opts = |flavor| CoxOptions {
        flavor,
        include_treatment: true,
        solver: solver.clone(),
    };
    let outcome_model = fit_cox_l1(cohort, covariate_set, lambda_outcome, &opts(EventFlavor::Outcome))?;
    let censor_model = fit_cox_l1(cohort, covariate_set, lambda_censor, &opts(EventFlavor::Censoring))?;
    let outcome_baseline = breslow_baseline(&outcome_model, cohort)?;
    let censor_baseline = breslow_baseline(&censor_model, cohort)?;
    Ok(GeneratingModel {
        outcome_model,
        censor_model,
        outcome_baseline,
        censor_baseline,
        t_max: cohort.t_max(),
    })
}

/// Smallest jump time with cumulative value `>= v`; `None` past the support.
pub fn invert_cum_hazard(h: &StepFunction, v: f64) -> Option<f64> {
    let k = h.values().partition_point(|&x| x < v);
    h.times().get(k).copied()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedOutcomes {
    pub followup_time: Vec<f64>,
    pub event: Vec<bool>,
    pub true_hr: f64,
    pub replicate_seed: u64,
}

/// Sidecar metadata written next to exported simulated outcomes.
#[derive(Serialize)]
struct Sidecar {
    true_hr: f64,
    replicate_seed: u64,
}

impl SimulatedOutcomes {
    /// The base cohort with these outcomes substituted.
    pub fn apply(&self, cohort: &Cohort) -> Result<Cohort> {
        cohort.with_outcomes(self.followup_time.clone(), self.event.clone())
    }

    pub fn write_csv(&self, cohort: &Cohort, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject_id", "followup_time", "event"])?;
        for ((id, t), e) in cohort.subject_ids().iter().zip(&self.followup_time).zip(&self.event) {
            w.write_record([id.to_string(), t.to_string(), u8::from(*e).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Sidecar {
            true_hr: self.true_hr,
            replicate_seed: self.replicate_seed,
        })?)
    }
}

/// Inverse-transform draws of outcome and censoring times. The outcome
/// treatment coefficient is replaced by `ln(true_hr)`; the censoring model
/// keeps its fitted one. Uniforms are drawn per subject, U then V.
pub fn simulate_outcomes(gm: &GeneratingModel, cohort: &Cohort, true_hr: f64, replicate_seed: u64) -> Result<SimulatedOutcomes> {
    if !(true_hr > 0.0 && true_hr.is_finite()) {
        return Err(Error::Config(format!("true_hr {true_hr} must be positive")));
    }
    let mut outcome = gm.outcome_model.clone();
    outcome.includes_treatment = true;
    outcome.treatment_coef = true_hr.ln();
    let lp_t = outcome.linear_predictor(cohort);
    let lp_c = gm.censor_model.linear_predictor(cohort);

    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed);
    let n = cohort.n_subjects();
    let mut followup_time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        // 1 - [0,1) keeps the uniforms in (0, 1]
        let u: f64 = 1.0 - rng.random::<f64>();
        let v: f64 = 1.0 - rng.random::<f64>();
        let t = invert_cum_hazard(&gm.outcome_baseline, -u.ln() / lp_t[i].exp()).unwrap_or(f64::INFINITY);
        let c = invert_cum_hazard(&gm.censor_baseline, -v.ln() / lp_c[i].exp()).unwrap_or(f64::INFINITY);
        let y = t.min(c).min(gm.t_max);
        followup_time.push(y);
        event.push(t <= c && t <= gm.t_max);
    }
    Ok(SimulatedOutcomes {
        followup_time,
        event,
        true_hr,
        replicate_seed,
    })
}
