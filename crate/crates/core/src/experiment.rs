//! Experiment orchestration: simulation cells, negative controls and the
//! on-disk report bundle.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{generate_cohort, load_cohort_with_horizon, save_cohort, Cohort, CovariateId, GeneratorConfig};
use crate::cox::{cross_validate_cox_lambda, fit_cox_stratified, CoxOptions, EstimationResult, EventFlavor};
use crate::design::{CvConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::glm::FittedModel;
use crate::matching::{match_with_ids, MatchConfig, MatchResult};
use crate::metrics::{
    balance_table, bias_summary, coverage_of, fit_empirical_null_from, write_estimates_csv, BalanceTable,
    BiasSummary, NullDistribution,
};
use crate::plasmode::{fit_generating_model, simulate_outcomes, GeneratingModel, SimulatedOutcomes};
use crate::ps::{
    cox_nonzero_set, equipoise_fraction, estimate_ps, hdps_screen, inject_iv, preference_score, select_all,
    CovariateSet, IvDirection, IvSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// No PS; the whole cohort is one stratum.
    Unadjusted,
    All,
    Hdps,
    /// Nonzero covariates of the generating outcome model.
    Cox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    Ids(Vec<CovariateId>),
    YearIndicators,
    /// The year indicator with the largest |coefficient| in the All-covariates PS model.
    StrongestYearIndicator,
}

/// Instrument settings; the injection seed comes from the seed schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvSetting {
    pub prevalence: f64,
    pub rr: f64,
    #[serde(default)]
    pub direction: IvDirection,
}

impl IvSetting {
    pub fn with_seed(&self, seed: u64) -> IvSpec {
        IvSpec {
            prevalence: self.prevalence,
            rr: self.rr,
            direction: self.direction,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub strategy: Strategy,
    #[serde(default)]
    pub exclude: Vec<Exclusion>,
    #[serde(default)]
    pub iv: Option<IvSetting>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortFiles {
    pub subjects: PathBuf,
    pub covariates: PathBuf,
    #[serde(default)]
    pub t_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratingLambda {
    CrossValidated,
    Fixed { outcome: f64, censor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HdpsSettings {
    pub n_prevalent: usize,
    pub n_select: usize,
}

impl Default for HdpsSettings {
    fn default() -> Self {
        Self {
            n_prevalent: 500,
            n_select: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub cv: CvConfig,
    pub solver: SolverConfig,
    pub hdps: HdpsSettings,
    pub generating_lambda: GeneratingLambda,
    /// Chance that each generating-model coefficient survives into a
    /// negative-control outcome model.
    pub negative_control_keep_fraction: f64,
    /// Year indicators for loaded cohorts; generated cohorts use the generator's.
    pub year_indicator_ids: Option<Vec<CovariateId>>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            cv: CvConfig::default(),
            solver: SolverConfig::default(),
            hdps: HdpsSettings::default(),
            generating_lambda: GeneratingLambda::CrossValidated,
            negative_control_keep_fraction: 0.5,
            year_indicator_ids: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub cohort_files: Option<CohortFiles>,
    pub ps_models: Vec<ModelSpec>,
    pub true_hrs: Vec<f64>,
    pub n_replicates: usize,
    pub n_negative_controls: usize,
    #[serde(default, rename = "match")]
    pub matching: MatchConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub settings: Settings,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cohort_files.is_none() {
            self.generator.validate()?;
        }
        if self.n_replicates == 0 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.ps_models.is_empty() {
            return Err(Error::Config("ps_models is empty".into()));
        }
        if let Some(hr) = self.true_hrs.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::Config(format!("true hazard ratio {hr} must be positive")));
        }
        if self.true_hrs.is_empty() {
            return Err(Error::Config("true_hrs is empty".into()));
        }
        let mut labels: Vec<&str> = self.ps_models.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model labels must be unique".into()));
        }
        for m in &self.ps_models {
            if m.label.is_empty() {
                return Err(Error::Config("model label is empty".into()));
            }
            if m.strategy == Strategy::Unadjusted && (m.iv.is_some() || !m.exclude.is_empty()) {
                return Err(Error::Config(format!("unadjusted model {} cannot take exclusions or an IV", m.label)));
            }
        }
        let kf = self.settings.negative_control_keep_fraction;
        if !(0.0..=1.0).contains(&kf) {
            return Err(Error::Config(format!("negative_control_keep_fraction {kf} outside [0, 1]")));
        }
        self.settings.cv.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// The six base models followed by the 27 instrument variants.
pub fn study_model_grid() -> Vec<ModelSpec> {
    let base = |label: &str, strategy, exclude| ModelSpec {
        label: label.to_string(),
        strategy,
        exclude,
        iv: None,
    };
    let mut models = vec![
        base("Unadjusted", Strategy::Unadjusted, vec![]),
        base("All Covariates", Strategy::All, vec![]),
        base(
            "All Covariates minus strongest year",
            Strategy::All,
            vec![Exclusion::StrongestYearIndicator],
        ),
        base("All Covariates minus years", Strategy::All, vec![Exclusion::YearIndicators]),
        base("HDPS Set", Strategy::Hdps, vec![]),
        base("Cox Set", Strategy::Cox, vec![]),
    ];
    for (name, strategy) in [("All Covariates", Strategy::All), ("HDPS Set", Strategy::Hdps), ("Cox Set", Strategy::Cox)] {
        for prevalence in [0.025, 0.05, 0.1] {
            for rr in [1.5, 2.0, 4.0] {
                models.push(ModelSpec {
                    label: format!("{name} + IV {prevalence}/{rr}"),
                    strategy,
                    exclude: vec![],
                    iv: Some(IvSetting {
                        prevalence,
                        rr,
                        direction: IvDirection::TreatedHigher,
                    }),
                });
            }
        }
    }
    models
}

/// Full-size study layout: 33 models, four true HRs, 100 replicates, 49 controls.
pub fn full_study_config(generator: GeneratorConfig, output_dir: PathBuf, master_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        generator,
        cohort_files: None,
        ps_models: study_model_grid(),
        true_hrs: vec![1.0, 1.5, 2.0, 4.0],
        n_replicates: 100,
        n_negative_controls: 49,
        matching: MatchConfig::default(),
        seeds: Seeds { master: master_seed },
        output_dir,
        settings: Settings::default(),
    }
}

mod tag {
    pub const OUTCOME: u64 = 1;
    pub const IV: u64 = 2;
    pub const PS_FOLDS: u64 = 3;
    pub const BASE_FOLDS: u64 = 4;
    pub const NC_MODEL: u64 = 5;
    pub const NC_OUTCOME: u64 = 6;
    pub const NC_IV: u64 = 7;
    pub const NC_FOLDS: u64 = 8;
    pub const GENERATING: u64 = 9;
    pub const STRONGEST_YEAR: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed as a pure function of the master seed and a tag path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Replicate seed of simulation cell `(model, hr, replicate)`.
pub fn cell_seed(master: u64, model: usize, hr: usize, replicate: usize) -> u64 {
    derive_seed(master, &[tag::OUTCOME, model as u64, hr as u64, replicate as u64])
}

/// A fitted PS model with its matched strata.
#[derive(Clone, Debug)]
pub struct PsFit {
    pub ps: Vec<f64>,
    pub model: FittedModel,
    pub matched: MatchResult,
    pub iv_id: Option<CovariateId>,
}

impl PsFit {
    pub fn iv_coef(&self) -> Option<f64> {
        self.iv_id.map(|id| self.model.coefficient(id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub model: usize,
    pub label: String,
    pub true_hr: f64,
    pub hr_index: usize,
    pub replicate: usize,
    pub seed: u64,
    pub estimate: Option<EstimationResult>,
    pub n_matched_treated: usize,
    pub n_matched_comparator: usize,
    pub iv_coef: Option<f64>,
    pub n_balance_covariates: usize,
    pub n_smd_exceeding: Option<usize>,
    pub error: Option<String>,
}

impl CellRecord {
    pub fn cell_label(&self) -> String {
        format!("{}/hr={}/rep={}", self.label, self.true_hr, self.replicate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeControlRecord {
    pub model: usize,
    pub label: String,
    pub control: usize,
    pub estimate: Option<EstimationResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub index: usize,
    pub label: String,
    pub stem: String,
    pub strategy: Strategy,
    pub has_iv: bool,
    pub covariate_set_size: Option<usize>,
    pub ps_export: Option<String>,
    pub balance_export: Option<String>,
    /// Fraction of subjects with preference score in [0.3, 0.7].
    pub equipoise: Option<f64>,
    pub ps_lambda: Option<f64>,
    pub ps_nonzero: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub model: usize,
    pub label: String,
    pub true_hr: f64,
    pub summary: BiasSummary,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullRow {
    pub model: usize,
    pub label: String,
    pub null: NullDistribution,
    pub n_excluded: usize,
    /// Fraction of converged controls whose interval contains 0.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub scope: String,
    pub message: String,
}

/// In-memory view of everything the run wrote.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub config_hash: String,
    pub models: Vec<ModelSummary>,
    pub cells: Vec<CellRecord>,
    pub negative_controls: Vec<NegativeControlRecord>,
    pub bias: Vec<BiasRow>,
    pub nulls: Vec<NullRow>,
    pub errors: Vec<ErrorRecord>,
    pub generating_model: GeneratingModel,
}

impl ExperimentReport {
    pub fn cells_for(&self, label: &str) -> impl Iterator<Item = &CellRecord> + '_ {
        let label = label.to_string();
        self.cells.iter().filter(move |c| c.label == label)
    }

    pub fn bias_for(&self, label: &str, true_hr: f64) -> Option<&BiasRow> {
        self.bias.iter().find(|b| b.label == label && b.true_hr == true_hr)
    }

    pub fn null_for(&self, label: &str) -> Option<&NullRow> {
        self.nulls.iter().find(|n| n.label == label)
    }
}

fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    cohort: Cohort,
    gm: GeneratingModel,
    /// Full covariate list used for balance diagnostics.
    balance_set: CovariateSet,
    base_sets: Vec<Option<std::result::Result<CovariateSet, String>>>,
}

fn load_or_generate(config: &ExperimentConfig) -> Result<Cohort> {
    match &config.cohort_files {
        Some(files) => load_cohort_with_horizon(&files.subjects, &files.covariates, files.t_max),
        None => generate_cohort(&config.generator),
    }
}

fn fit_generating(config: &ExperimentConfig, cohort: &Cohort) -> Result<GeneratingModel> {
    let ids: Vec<CovariateId> = cohort.covariate_ids().collect();
    let s = &config.settings;
    let (lo, lc) = match s.generating_lambda {
        GeneratingLambda::Fixed { outcome, censor } => (outcome, censor),
        GeneratingLambda::CrossValidated => {
            let opts = |flavor| CoxOptions {
                flavor,
                include_treatment: true,
                solver: s.solver.clone(),
            };
            let seed = derive_seed(config.seeds.master, &[tag::GENERATING]);
            let lo = cross_validate_cox_lambda(cohort, &ids, &opts(EventFlavor::Outcome), &s.cv, seed)?;
            let lc = cross_validate_cox_lambda(cohort, &ids, &opts(EventFlavor::Censoring), &s.cv, seed ^ 1)?;
            (lo, lc)
        }
    };
    fit_generating_model(cohort, &ids, lo, lc, &s.solver)
}

fn year_ids(config: &ExperimentConfig, cohort: &Cohort) -> Vec<CovariateId> {
    let ids = match (&config.settings.year_indicator_ids, &config.cohort_files) {
        (Some(ids), _) => ids.clone(),
        (None, None) => config.generator.year_indicator_ids(),
        (None, Some(_)) => vec![],
    };
    ids.into_iter().filter(|&id| cohort.contains_covariate(id)).collect()
}

impl<'a> Context<'a> {
    fn new(config: &'a ExperimentConfig) -> Result<Self> {
        let cohort = load_or_generate(config)?;
        let gm = fit_generating(config, &cohort)?;
        let balance_set = select_all(&cohort, &[])?;
        let mut ctx = Self {
            config,
            cohort,
            gm,
            balance_set,
            base_sets: Vec::new(),
        };
        let needs_strongest = config
            .ps_models
            .iter()
            .any(|m| m.exclude.contains(&Exclusion::StrongestYearIndicator));
        let strongest = if needs_strongest {
            Some(ctx.strongest_year().map_err(|e| e.to_string()))
        } else {
            None
        };
        ctx.base_sets = config
            .ps_models
            .iter()
            .map(|m| match m.strategy {
                Strategy::Unadjusted => None,
                _ => Some(ctx.resolve_set(m, strongest.as_ref()).map_err(|e| e.to_string())),
            })
            .collect();
        Ok(ctx)
    }

    fn strongest_year(&self) -> Result<Option<CovariateId>> {
        let years = year_ids(self.config, &self.cohort);
        if years.is_empty() {
            return Ok(None);
        }
        let s = &self.config.settings;
        let seed = derive_seed(self.config.seeds.master, &[tag::STRONGEST_YEAR]);
        let (_, model) = estimate_ps(&self.cohort, &self.balance_set, &s.cv, &s.solver, seed)?;
        let best = years
            .iter()
            .copied()
            .max_by(|&a, &b| {
                model
                    .coefficient(a)
                    .abs()
                    .total_cmp(&model.coefficient(b).abs())
                    .then(b.cmp(&a))
            })
            .expect("nonempty");
        Ok(Some(best))
    }

    fn resolve_set(
        &self,
        spec: &ModelSpec,
        strongest: Option<&std::result::Result<Option<CovariateId>, String>>,
    ) -> Result<CovariateSet> {
        let mut exclude: Vec<CovariateId> = Vec::new();
        for rule in &spec.exclude {
            match rule {
                Exclusion::Ids(ids) => exclude.extend(ids),
                Exclusion::YearIndicators => exclude.extend(year_ids(self.config, &self.cohort)),
                Exclusion::StrongestYearIndicator => match strongest {
                    Some(Ok(Some(id))) => exclude.push(*id),
                    Some(Ok(None)) => {}
                    Some(Err(e)) => return Err(Error::Config(format!("strongest year indicator: {e}"))),
                    None => unreachable!("strongest year resolved whenever requested"),
                },
            }
        }
        let base = match spec.strategy {
            Strategy::All | Strategy::Unadjusted => select_all(&self.cohort, &[])?,
            Strategy::Hdps => hdps_screen(&self.cohort, self.config.settings.hdps.n_prevalent, self.config.settings.hdps.n_select)?,
            Strategy::Cox => cox_nonzero_set(&self.gm.outcome_model),
        };
        if exclude.is_empty() {
            return Ok(base);
        }
        let ids = base.ids().iter().copied().filter(|id| !exclude.contains(id)).collect();
        CovariateSet::new(ids, crate::ps::StrategyTag::Exclude, &self.cohort)
    }

    fn fit_ps(&self, set: &CovariateSet, iv: Option<IvSpec>, fold_seed: u64) -> Result<PsFit> {
        let s = &self.config.settings;
        let (cohort, set, iv_id) = match iv {
            Some(spec) => {
                let (with_iv, id) = inject_iv(&self.cohort, &spec)?;
                (std::borrow::Cow::Owned(with_iv), set.with_covariate(id), Some(id))
            }
            None => (std::borrow::Cow::Borrowed(&self.cohort), set.clone(), None),
        };
        let (ps, model) = estimate_ps(&cohort, &set, &s.cv, &s.solver, fold_seed)?;
        let matched = match_with_ids(&ps, cohort.treatment(), cohort.subject_ids(), &self.config.matching)?;
        Ok(PsFit {
            ps,
            model,
            matched,
            iv_id,
        })
    }

    fn estimate(&self, outcomes: &SimulatedOutcomes, matched: Option<&MatchResult>) -> Result<EstimationResult> {
        let t = &outcomes.followup_time;
        let e = &outcomes.event;
        let tr = self.cohort.treatment();
        match matched {
            None => fit_cox_stratified(t, e, tr, &vec![0; t.len()]),
            Some(m) => {
                let (rows, strata) = m.row_strata();
                let tt: Vec<f64> = rows.iter().map(|&r| t[r]).collect();
                let ee: Vec<bool> = rows.iter().map(|&r| e[r]).collect();
                let trt: Vec<bool> = rows.iter().map(|&r| tr[r]).collect();
                fit_cox_stratified(&tt, &ee, &trt, &strata)
            }
        }
    }
}

fn write_ps_csv(path: &Path, cohort: &Cohort, ps: &[f64]) -> Result<()> {
    let pref = preference_score(ps, cohort.treated_fraction());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject_id", "ps", "preference_score"])?;
    for ((id, p), f) in cohort.subject_ids().iter().zip(ps).zip(&pref) {
        w.write_record([id.to_string(), p.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_match_csv(path: &Path, cohort: &Cohort, matched: &MatchResult) -> Result<()> {
    let ids = cohort.subject_ids();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stratum_id", "subject_id", "role"])?;
    for (k, s) in matched.strata().iter().enumerate() {
        w.write_record([k.to_string(), ids[s.treated].to_string(), "treated".into()])?;
        for &c in &s.comparators {
            w.write_record([k.to_string(), ids[c].to_string(), "comparator".into()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn opt_string<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_cells_csv(path: &Path, cells: &[CellRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "model",
        "label",
        "true_hr",
        "replicate",
        "seed",
        "log_hr",
        "se",
        "converged",
        "n_matched_treated",
        "n_matched_comparator",
        "iv_coef",
        "n_balance_covariates",
        "n_smd_exceeding",
        "error",
    ])?;
    for c in cells {
        w.write_record([
            c.model.to_string(),
            c.label.clone(),
            c.true_hr.to_string(),
            c.replicate.to_string(),
            c.seed.to_string(),
            opt_string(c.estimate.map(|e| e.log_hr)),
            opt_string(c.estimate.map(|e| e.se)),
            opt_string(c.estimate.map(|e| e.converged)),
            c.n_matched_treated.to_string(),
            c.n_matched_comparator.to_string(),
            opt_string(c.iv_coef),
            c.n_balance_covariates.to_string(),
            opt_string(c.n_smd_exceeding),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_bias_csv(path: &Path, rows: &[BiasRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "label", "true_hr", "mean_bias", "sd", "coverage", "n_converged", "n_failed"])?;
    for r in rows {
        w.write_record([
            r.model.to_string(),
            r.label.clone(),
            r.true_hr.to_string(),
            r.summary.mean_bias.to_string(),
            r.summary.sd.to_string(),
            r.coverage.to_string(),
            r.summary.n_converged.to_string(),
            r.summary.n_failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_errors_csv(path: &Path, errors: &[ErrorRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scope", "message"])?;
    for e in errors {
        w.write_record([e.scope.as_str(), e.message.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    config: &'a ExperimentConfig,
    models: &'a [ModelSummary],
    n_cells: usize,
    n_negative_control_fits: usize,
    n_errors: usize,
    artifacts: Vec<String>,
}

/// Reads the manifest back for downstream tools.
#[derive(Deserialize)]
pub struct ManifestView {
    pub config_hash: String,
    pub models: Vec<ModelSummary>,
    pub artifacts: Vec<String>,
}

fn record_artifact(dir: &Path, artifacts: &mut Vec<String>, path: &Path) {
    if let Ok(rel) = path.strip_prefix(dir) {
        artifacts.push(rel.to_string_lossy().replace('\\', "/"));
    }
}

/// Draws one negative-control outcome model: a random subset of the fitted
/// covariate coefficients, no treatment effect.
fn negative_control_model(gm: &GeneratingModel, keep: f64, seed: u64) -> GeneratingModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefs: BTreeMap<CovariateId, f64> = gm
        .outcome_model
        .coefficients
        .iter()
        .filter(|_| rng.random_bool(keep))
        .map(|(&id, &b)| (id, b))
        .collect();
    gm.with_outcome_coefficients(coefs)
}

/// Runs the configured study and writes the report bundle.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let ctx = Context::new(config)?;
    let master = config.seeds.master;
    let dir = config.output_dir.clone();
    for sub in ["", "cohort", "ps", "balance", "matches", "covariate_sets"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut artifacts = Vec::new();
    let mut errors = Vec::new();

    let subjects_path = dir.join("cohort/subjects.csv");
    let covariates_path = dir.join("cohort/covariates.csv");
    save_cohort(&ctx.cohort, &subjects_path, &covariates_path)?;
    record_artifact(&dir, &mut artifacts, &subjects_path);
    record_artifact(&dir, &mut artifacts, &covariates_path);
    let gm_path = dir.join("generating_model.json");
    fs::write(&gm_path, serde_json::to_string_pretty(&ctx.gm)?)?;
    record_artifact(&dir, &mut artifacts, &gm_path);

    // PS fits reused by every cell of a model without an instrument
    let base_fits: Vec<Option<std::result::Result<PsFit, String>>> = config
        .ps_models
        .par_iter()
        .enumerate()
        .map(|(m, spec)| match (&ctx.base_sets[m], spec.iv) {
            (None, _) => None,
            (Some(Err(e)), _) => Some(Err(e.clone())),
            (Some(Ok(set)), None) => {
                Some(ctx.fit_ps(set, None, derive_seed(master, &[tag::BASE_FOLDS, m as u64])).map_err(|e| e.to_string()))
            }
            (Some(Ok(_)), Some(_)) => None,
        })
        .collect();

    // negative-control PS fits: base fit, or one instrument draw per model
    let nc_fits: Vec<Option<std::result::Result<PsFit, String>>> = config
        .ps_models
        .par_iter()
        .enumerate()
        .map(|(m, spec)| match (&ctx.base_sets[m], spec.iv) {
            (Some(Ok(set)), Some(iv)) if config.n_negative_controls > 0 => Some(
                ctx.fit_ps(
                    set,
                    Some(iv.with_seed(derive_seed(master, &[tag::NC_IV, m as u64]))),
                    derive_seed(master, &[tag::NC_FOLDS, m as u64]),
                )
                .map_err(|e| e.to_string()),
            ),
            _ => None,
        })
        .collect();

    let mut models = Vec::with_capacity(config.ps_models.len());
    for (m, spec) in config.ps_models.iter().enumerate() {
        let stem = format!("{:02}_{}", m + 1, slug(&spec.label));
        let mut summary = ModelSummary {
            index: m,
            label: spec.label.clone(),
            stem: stem.clone(),
            strategy: spec.strategy,
            has_iv: spec.iv.is_some(),
            covariate_set_size: None,
            ps_export: None,
            balance_export: None,
            equipoise: None,
            ps_lambda: None,
            ps_nonzero: None,
        };
        match &ctx.base_sets[m] {
            Some(Ok(set)) => {
                summary.covariate_set_size = Some(set.len());
                let p = dir.join(format!("covariate_sets/{stem}.json"));
                fs::write(&p, set.to_json()?)?;
                record_artifact(&dir, &mut artifacts, &p);
            }
            Some(Err(e)) => errors.push(ErrorRecord {
                scope: format!("{}/covariate-set", spec.label),
                message: e.clone(),
            }),
            None => {}
        }
        let exported = base_fits[m].as_ref().or(nc_fits[m].as_ref());
        match exported {
            Some(Ok(fit)) => {
                let p = dir.join(format!("ps/{stem}.csv"));
                write_ps_csv(&p, &ctx.cohort, &fit.ps)?;
                record_artifact(&dir, &mut artifacts, &p);
                summary.ps_export = Some(format!("ps/{stem}.csv"));
                summary.equipoise = Some(equipoise_fraction(
                    &preference_score(&fit.ps, ctx.cohort.treated_fraction()),
                    0.3,
                    0.7,
                ));
                summary.ps_lambda = Some(fit.model.lambda);
                summary.ps_nonzero = Some(fit.model.n_nonzero());
                let p = dir.join(format!("matches/{stem}.csv"));
                write_match_csv(&p, &ctx.cohort, &fit.matched)?;
                record_artifact(&dir, &mut artifacts, &p);
                let table = balance_table(&ctx.cohort, &ctx.balance_set, &fit.matched)?;
                let p = dir.join(format!("balance/{stem}.csv"));
                table.write_csv(&p)?;
                record_artifact(&dir, &mut artifacts, &p);
                summary.balance_export = Some(format!("balance/{stem}.csv"));
            }
            Some(Err(e)) => errors.push(ErrorRecord {
                scope: format!("{}/ps-fit", spec.label),
                message: e.clone(),
            }),
            None => {}
        }
        models.push(summary);
    }

    // simulation cells
    let grid: Vec<(usize, usize, usize)> = (0..config.ps_models.len())
        .flat_map(|m| (0..config.true_hrs.len()).flat_map(move |h| (0..config.n_replicates).map(move |r| (m, h, r))))
        .collect();
    let cells: Vec<CellRecord> = grid
        .par_iter()
        .map(|&(m, h, r)| run_cell(&ctx, &base_fits, m, h, r))
        .collect();
    for c in cells.iter().filter(|c| c.error.is_some()) {
        errors.push(ErrorRecord {
            scope: c.cell_label(),
            message: c.error.clone().unwrap_or_default(),
        });
    }

    // negative controls: one outcome draw per control, shared by all models
    let keep = config.settings.negative_control_keep_fraction;
    let nc_outcomes: Vec<Result<SimulatedOutcomes>> = (0..config.n_negative_controls)
        .into_par_iter()
        .map(|k| {
            let ncm = negative_control_model(&ctx.gm, keep, derive_seed(master, &[tag::NC_MODEL, k as u64]));
            simulate_outcomes(&ncm, &ctx.cohort, 1.0, derive_seed(master, &[tag::NC_OUTCOME, k as u64]))
        })
        .collect();
    let nc_grid: Vec<(usize, usize)> = (0..config.ps_models.len())
        .flat_map(|m| (0..config.n_negative_controls).map(move |k| (m, k)))
        .collect();
    let negative_controls: Vec<NegativeControlRecord> = nc_grid
        .par_iter()
        .map(|&(m, k)| {
            let spec = &config.ps_models[m];
            let fit = if spec.iv.is_some() { &nc_fits[m] } else { &base_fits[m] };
            let result = (|| -> std::result::Result<EstimationResult, String> {
                let outcomes = nc_outcomes[k].as_ref().map_err(|e| e.to_string())?;
                let matched = match (spec.strategy, fit) {
                    (Strategy::Unadjusted, _) => None,
                    (_, Some(Ok(f))) => Some(&f.matched),
                    (_, Some(Err(e))) => return Err(e.clone()),
                    (_, None) => return Err("no PS fit".into()),
                };
                ctx.estimate(outcomes, matched).map_err(|e| e.to_string())
            })();
            NegativeControlRecord {
                model: m,
                label: spec.label.clone(),
                control: k,
                estimate: result.as_ref().ok().copied(),
                error: result.err(),
            }
        })
        .collect();
    for n in negative_controls.iter().filter(|n| n.error.is_some()) {
        errors.push(ErrorRecord {
            scope: format!("{}/nc={}", n.label, n.control),
            message: n.error.clone().unwrap_or_default(),
        });
    }

    // summaries
    let mut bias = Vec::new();
    for (m, spec) in config.ps_models.iter().enumerate() {
        for (h, &hr) in config.true_hrs.iter().enumerate() {
            let results: Vec<EstimationResult> = cells
                .iter()
                .filter(|c| c.model == m && c.hr_index == h)
                .filter_map(|c| c.estimate)
                .collect();
            let n_missing = config.n_replicates - results.len();
            match bias_summary(&results, hr) {
                Ok(mut summary) => {
                    summary.n_failed += n_missing;
                    bias.push(BiasRow {
                        model: m,
                        label: spec.label.clone(),
                        true_hr: hr,
                        summary,
                        coverage: coverage_of(&results, hr),
                    });
                }
                Err(e) => errors.push(ErrorRecord {
                    scope: format!("{}/hr={}/bias", spec.label, hr),
                    message: e.to_string(),
                }),
            }
        }
    }
    let mut nulls = Vec::new();
    if config.n_negative_controls > 0 {
        for (m, spec) in config.ps_models.iter().enumerate() {
            let results: Vec<EstimationResult> = negative_controls
                .iter()
                .filter(|n| n.model == m)
                .filter_map(|n| n.estimate)
                .collect();
            let n_missing = config.n_negative_controls - results.len();
            match fit_empirical_null_from(&results) {
                Ok((null, excluded)) => nulls.push(NullRow {
                    model: m,
                    label: spec.label.clone(),
                    null,
                    n_excluded: excluded + n_missing,
                    coverage: coverage_of(&results, 1.0),
                }),
                Err(e) => errors.push(ErrorRecord {
                    scope: format!("{}/null", spec.label),
                    message: e.to_string(),
                }),
            }
        }
    }

    let estimates: Vec<(String, EstimationResult)> =
        cells.iter().filter_map(|c| c.estimate.map(|e| (c.cell_label(), e))).collect();
    let p = dir.join("estimates.csv");
    write_estimates_csv(&p, &estimates)?;
    record_artifact(&dir, &mut artifacts, &p);
    let p = dir.join("cells.csv");
    write_cells_csv(&p, &cells)?;
    record_artifact(&dir, &mut artifacts, &p);
    let nc_rows: Vec<(String, EstimationResult)> = negative_controls
        .iter()
        .filter_map(|n| n.estimate.map(|e| (format!("{}/nc={}", n.label, n.control), e)))
        .collect();
    let p = dir.join("nc_estimates.csv");
    write_estimates_csv(&p, &nc_rows)?;
    record_artifact(&dir, &mut artifacts, &p);
    let p = dir.join("bias_summary.csv");
    write_bias_csv(&p, &bias)?;
    record_artifact(&dir, &mut artifacts, &p);
    let p = dir.join("null_distributions.json");
    let null_map: BTreeMap<&str, &NullRow> = nulls.iter().map(|n| (n.label.as_str(), n)).collect();
    fs::write(&p, serde_json::to_string_pretty(&null_map)?)?;
    record_artifact(&dir, &mut artifacts, &p);
    let p = dir.join("balance_summary.csv");
    write_balance_summary(&p, &cells)?;
    record_artifact(&dir, &mut artifacts, &p);
    let p = dir.join("errors.csv");
    write_errors_csv(&p, &errors)?;
    record_artifact(&dir, &mut artifacts, &p);

    let config_hash = config.hash()?;
    artifacts.sort();
    let manifest = Manifest {
        config_hash: &config_hash,
        config,
        models: &models,
        n_cells: cells.len(),
        n_negative_control_fits: negative_controls.len(),
        n_errors: errors.len(),
        artifacts,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    Ok(ExperimentReport {
        output_dir: dir,
        config_hash,
        models,
        cells,
        negative_controls,
        bias,
        nulls,
        errors,
        generating_model: ctx.gm,
    })
}

fn write_balance_summary(path: &Path, cells: &[CellRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "label", "true_hr", "replicate", "n_covariates", "n_smd_exceeding"])?;
    for c in cells.iter().filter(|c| c.n_smd_exceeding.is_some()) {
        w.write_record([
            c.model.to_string(),
            c.label.clone(),
            c.true_hr.to_string(),
            c.replicate.to_string(),
            c.n_balance_covariates.to_string(),
            opt_string(c.n_smd_exceeding),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_cell(
    ctx: &Context<'_>,
    base_fits: &[Option<std::result::Result<PsFit, String>>],
    m: usize,
    h: usize,
    r: usize,
) -> CellRecord {
    let config = ctx.config;
    let spec = &config.ps_models[m];
    let hr = config.true_hrs[h];
    let seed = cell_seed(config.seeds.master, m, h, r);
    let mut rec = CellRecord {
        model: m,
        label: spec.label.clone(),
        true_hr: hr,
        hr_index: h,
        replicate: r,
        seed,
        estimate: None,
        n_matched_treated: 0,
        n_matched_comparator: 0,
        iv_coef: None,
        n_balance_covariates: 0,
        n_smd_exceeding: None,
        error: None,
    };
    let outcome = (|| -> std::result::Result<(), String> {
        let outcomes = simulate_outcomes(&ctx.gm, &ctx.cohort, hr, seed).map_err(|e| e.to_string())?;
        let fresh;
        let fit = match (spec.strategy, spec.iv, &base_fits[m]) {
            (Strategy::Unadjusted, _, _) => None,
            (_, Some(iv), _) => {
                let set = match &ctx.base_sets[m] {
                    Some(Ok(set)) => set,
                    Some(Err(e)) => return Err(e.clone()),
                    None => return Err("no covariate set".into()),
                };
                let iv_seed = derive_seed(config.seeds.master, &[tag::IV, m as u64, h as u64, r as u64]);
                let fold_seed = derive_seed(config.seeds.master, &[tag::PS_FOLDS, m as u64, h as u64, r as u64]);
                fresh = ctx.fit_ps(set, Some(iv.with_seed(iv_seed)), fold_seed).map_err(|e| e.to_string())?;
                let table: BalanceTable =
                    balance_table(&ctx.cohort, &ctx.balance_set, &fresh.matched).map_err(|e| e.to_string())?;
                rec.n_balance_covariates = table.rows.len();
                rec.n_smd_exceeding = Some(table.n_exceeding);
                Some(&fresh)
            }
            (_, None, Some(Ok(f))) => Some(f),
            (_, None, Some(Err(e))) => return Err(e.clone()),
            (_, None, None) => return Err("no PS fit".into()),
        };
        if let Some(f) = fit {
            rec.n_matched_treated = f.matched.n_matched_treated();
            rec.n_matched_comparator = f.matched.n_matched_comparator();
            rec.iv_coef = f.iv_coef();
        } else {
            rec.n_matched_treated = ctx.cohort.n_treated();
            rec.n_matched_comparator = ctx.cohort.n_subjects() - ctx.cohort.n_treated();
        }
        let est = ctx.estimate(&outcomes, fit.map(|f| &f.matched)).map_err(|e| e.to_string())?;
        rec.estimate = Some(est);
        Ok(())
    })();
    rec.error = outcome.err();
    rec
}

#[derive(Deserialize)]
struct SubjectRow {
    subject_id: u64,
    treatment: u8,
}

#[derive(Deserialize)]
struct PsRow {
    subject_id: u64,
    preference_score: f64,
}

#[derive(Deserialize)]
struct BalanceCsvRow {
    covariate_id: CovariateId,
    smd_before: f64,
    smd_after: f64,
}

#[derive(Deserialize)]
struct BiasCsvRow {
    label: String,
    true_hr: f64,
    mean_bias: f64,
    sd: f64,
}

#[derive(Deserialize)]
struct EstimateCsvRow {
    label: String,
    log_hr: f64,
    ci_low: f64,
    ci_high: f64,
    converged: bool,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

pub const PREFERENCE_BINS: usize = 20;

/// Writes plot-ready tables under `<report_dir>/plots` and returns their paths.
pub fn emit_plot_data(report_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest: ManifestView = serde_json::from_str(&fs::read_to_string(require(report_dir.join("manifest.json"))?)?)?;
    let plots = report_dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();

    let mut arm: HashMap<u64, bool> = HashMap::new();
    let mut rdr = csv::Reader::from_path(require(report_dir.join("cohort/subjects.csv"))?)?;
    for row in rdr.deserialize() {
        let row: SubjectRow = row?;
        arm.insert(row.subject_id, row.treatment == 1);
    }

    let p = plots.join("preference_histogram.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["model", "arm", "bin_low", "bin_high", "count"])?;
    for model in &manifest.models {
        let Some(rel) = &model.ps_export else { continue };
        let mut counts = [[0usize; PREFERENCE_BINS]; 2];
        let mut rdr = csv::Reader::from_path(require(report_dir.join(rel))?)?;
        for row in rdr.deserialize() {
            let row: PsRow = row?;
            let treated = *arm.get(&row.subject_id).ok_or_else(|| {
                Error::Config(format!("subject {} in {rel} is missing from the cohort", row.subject_id))
            })?;
            let bin = ((row.preference_score * PREFERENCE_BINS as f64) as usize).min(PREFERENCE_BINS - 1);
            counts[usize::from(treated)][bin] += 1;
        }
        for (a, name) in [(1, "treated"), (0, "comparator")] {
            for (b, &count) in counts[a].iter().enumerate() {
                w.write_record([
                    model.label.clone(),
                    name.to_string(),
                    (b as f64 / PREFERENCE_BINS as f64).to_string(),
                    ((b + 1) as f64 / PREFERENCE_BINS as f64).to_string(),
                    count.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    written.push(p);

    let p = plots.join("bias_vs_sd.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["model", "true_hr", "mean_bias", "sd"])?;
    let mut rdr = csv::Reader::from_path(require(report_dir.join("bias_summary.csv"))?)?;
    for row in rdr.deserialize() {
        let row: BiasCsvRow = row?;
        w.write_record([row.label, row.true_hr.to_string(), row.mean_bias.to_string(), row.sd.to_string()])?;
    }
    w.flush()?;
    written.push(p);

    let p = plots.join("smd_scatter.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["model", "covariate_id", "abs_smd_before", "abs_smd_after"])?;
    for model in &manifest.models {
        let Some(rel) = &model.balance_export else { continue };
        let mut rdr = csv::Reader::from_path(require(report_dir.join(rel))?)?;
        for row in rdr.deserialize() {
            let row: BalanceCsvRow = row?;
            w.write_record([
                model.label.clone(),
                row.covariate_id.to_string(),
                row.smd_before.abs().to_string(),
                row.smd_after.abs().to_string(),
            ])?;
        }
    }
    w.flush()?;
    written.push(p);

    let p = plots.join("nc_strips.csv");
    let mut w = csv::Writer::from_path(&p)?;
    w.write_record(["model", "control", "log_hr", "ci_low", "ci_high", "converged", "significant"])?;
    let mut rdr = csv::Reader::from_path(require(report_dir.join("nc_estimates.csv"))?)?;
    for row in rdr.deserialize() {
        let row: EstimateCsvRow = row?;
        let (model, control) = row
            .label
            .rsplit_once("/nc=")
            .ok_or_else(|| Error::Config(format!("malformed control label {}", row.label)))?;
        let significant = row.ci_low > 0.0 || row.ci_high < 0.0;
        w.write_record([
            model.to_string(),
            control.to_string(),
            row.log_hr.to_string(),
            row.ci_low.to_string(),
            row.ci_high.to_string(),
            row.converged.to_string(),
            significant.to_string(),
        ])?;
    }
    w.flush()?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_33_models() {
        let g = study_model_grid();
        assert_eq!(g.len(), 33);
        assert_eq!(g.iter().filter(|m| m.iv.is_some()).count(), 27);
        assert!(g[6..15].iter().all(|m| m.strategy == Strategy::All));
        assert!(g[15..24].iter().all(|m| m.strategy == Strategy::Hdps));
        assert!(g[24..].iter().all(|m| m.strategy == Strategy::Cox));
    }

    #[test]
    fn seeds_are_distinct_per_cell() {
        let mut seen = std::collections::HashSet::new();
        for m in 0..5 {
            for h in 0..4 {
                for r in 0..50 {
                    assert!(seen.insert(cell_seed(7, m, h, r)));
                }
            }
        }
        assert_eq!(cell_seed(7, 1, 2, 3), cell_seed(7, 1, 2, 3));
        assert_ne!(cell_seed(7, 1, 2, 3), cell_seed(8, 1, 2, 3));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("All Covariates + IV 0.1/4"), "all_covariates_iv_0_1_4");
    }
}
