//! Claims-style cohorts: subjects with a treatment flag, sparse binary
//! covariates, follow-up time and an event indicator.
//!
//! Covariates are stored column-major: each covariate id maps to the sorted
//! row indices of the subjects carrying it. A covariate column with no
//! carriers is never stored.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CovariateId = u32;
pub type SubjectId = u64;

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    subject_ids: Vec<SubjectId>,
    treatment: Vec<bool>,
    followup_time: Vec<f64>,
    event: Vec<bool>,
    t_max: f64,
    columns: BTreeMap<CovariateId, Vec<u32>>,
}

impl Cohort {
    /// Builds a cohort and checks its invariants. Row lists inside `columns`
    /// are sorted and deduplicated; empty columns are dropped.
    pub fn new(
        subject_ids: Vec<SubjectId>,
        treatment: Vec<bool>,
        followup_time: Vec<f64>,
        event: Vec<bool>,
        t_max: f64,
        columns: BTreeMap<CovariateId, Vec<u32>>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        if treatment.len() != n || followup_time.len() != n || event.len() != n {
            return Err(Error::InvalidCohort(
                "per-subject vectors have different lengths".into(),
            ));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::InvalidCohort(format!("t_max must be positive, got {t_max}")));
        }
        for (row, &t) in followup_time.iter().enumerate() {
            if !(t.is_finite() && (0.0..=t_max).contains(&t)) {
                return Err(Error::InvalidCohort(format!(
                    "subject {} has follow-up time {t} outside [0, {t_max}]",
                    subject_ids[row]
                )));
            }
        }
        if !treatment.iter().any(|&t| t) || treatment.iter().all(|&t| t) {
            return Err(Error::InvalidCohort(
                "cohort needs at least one treated and one comparator subject".into(),
            ));
        }
        let mut seen = HashMap::with_capacity(n);
        for (row, &id) in subject_ids.iter().enumerate() {
            if seen.insert(id, row).is_some() {
                return Err(Error::InvalidCohort(format!("duplicate subject id {id}")));
            }
        }
        let mut cleaned = BTreeMap::new();
        for (id, mut rows) in columns {
            rows.sort_unstable();
            rows.dedup();
            if let Some(&last) = rows.last() {
                if last as usize >= n {
                    return Err(Error::InvalidCohort(format!(
                        "covariate {id} references row {last} beyond {n} subjects"
                    )));
                }
                cleaned.insert(id, rows);
            }
        }
        Ok(Self {
            subject_ids,
            treatment,
            followup_time,
            event,
            t_max,
            columns: cleaned,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn subject_ids(&self) -> &[SubjectId] {
        &self.subject_ids
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn followup_time(&self) -> &[f64] {
        &self.followup_time
    }

    pub fn event(&self) -> &[bool] {
        &self.event
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&t| t).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.n_treated() as f64 / self.n_subjects() as f64
    }

    pub fn covariate_ids(&self) -> impl Iterator<Item = CovariateId> + '_ {
        self.columns.keys().copied()
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn contains_covariate(&self, id: CovariateId) -> bool {
        self.columns.contains_key(&id)
    }

    /// Sorted rows carrying `id`; empty when the covariate is absent.
    pub fn column(&self, id: CovariateId) -> &[u32] {
        self.columns.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn columns(&self) -> &BTreeMap<CovariateId, Vec<u32>> {
        &self.columns
    }

    pub fn n_entries(&self) -> usize {
        self.columns.values().map(Vec::len).sum()
    }

    pub fn max_covariate_id(&self) -> Option<CovariateId> {
        self.columns.keys().next_back().copied()
    }

    /// Copy of this cohort with replaced follow-up times and events.
    pub fn with_outcomes(&self, followup_time: Vec<f64>, event: Vec<bool>) -> Result<Self> {
        Self::new(
            self.subject_ids.clone(),
            self.treatment.clone(),
            followup_time,
            event,
            self.t_max,
            self.columns.clone(),
        )
    }

    /// Copy of this cohort with one additional covariate column.
    pub fn with_covariate(&self, id: CovariateId, rows: Vec<u32>) -> Result<Self> {
        if self.columns.contains_key(&id) {
            return Err(Error::InvalidCohort(format!("covariate {id} already exists")));
        }
        let mut columns = self.columns.clone();
        columns.insert(id, rows);
        Self::new(
            self.subject_ids.clone(),
            self.treatment.clone(),
            self.followup_time.clone(),
            self.event.clone(),
            self.t_max,
            columns,
        )
    }

    /// Dense 0/1 value of covariate `id` for every row.
    pub fn dense_column(&self, id: CovariateId) -> Vec<bool> {
        let mut out = vec![false; self.n_subjects()];
        for &r in self.column(id) {
            out[r as usize] = true;
        }
        out
    }
}

/// Fraction of subjects carrying each stored covariate.
pub fn covariate_prevalence(cohort: &Cohort) -> BTreeMap<CovariateId, f64> {
    let n = cohort.n_subjects() as f64;
    cohort
        .columns
        .iter()
        .map(|(&id, rows)| (id, rows.len() as f64 / n))
        .collect()
}

/// Parameters of the synthetic cohort generator.
///
/// Generic covariates use ids `0..n_covariates`. Optional age-bin indicators
/// follow them, then optional calendar-year indicators; each subject carries
/// exactly one age bin and one year indicator when those groups are enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_treated: usize,
    pub n_comparator: usize,
    pub n_covariates: usize,
    pub prevalence_range: (f64, f64),
    pub n_confounders: usize,
    pub treatment_coef_scale: f64,
    pub outcome_coef_scale: f64,
    pub baseline_hazard_rate: f64,
    pub censor_rate: f64,
    pub t_max: f64,
    pub seed: u64,
    /// Covariates that only affect treatment assignment.
    #[serde(default)]
    pub n_treatment_only: usize,
    /// Covariates that only affect the outcome hazard.
    #[serde(default)]
    pub n_outcome_only: usize,
    /// Log hazard ratio of treatment in the base outcome model.
    #[serde(default)]
    pub treatment_log_hr: f64,
    #[serde(default)]
    pub n_age_bins: usize,
    /// Slope across age bins (oldest bin gets the full value) on the
    /// treatment logit and the outcome log hazard respectively.
    #[serde(default)]
    pub age_treatment_effect: f64,
    #[serde(default)]
    pub age_outcome_effect: f64,
    #[serde(default)]
    pub n_year_indicators: usize,
    /// Treatment-logit offset of the first calendar year, decaying linearly
    /// to zero at the last one. Years never enter the outcome model.
    #[serde(default)]
    pub year_treatment_effect: f64,
}

impl GeneratorConfig {
    pub fn n_subjects(&self) -> usize {
        self.n_treated + self.n_comparator
    }

    pub fn age_bin_ids(&self) -> Vec<CovariateId> {
        let start = self.n_covariates as CovariateId;
        (start..start + self.n_age_bins as CovariateId).collect()
    }

    pub fn year_indicator_ids(&self) -> Vec<CovariateId> {
        let start = (self.n_covariates + self.n_age_bins) as CovariateId;
        (start..start + self.n_year_indicators as CovariateId).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_treated == 0 || self.n_comparator == 0 {
            return fail("both arms need at least one subject".into());
        }
        let (low, high) = self.prevalence_range;
        if !(low > 0.0 && low <= high && high < 1.0) {
            return fail(format!("prevalence range ({low}, {high}) must satisfy 0 < low <= high < 1"));
        }
        if self.n_confounders + self.n_treatment_only + self.n_outcome_only > self.n_covariates {
            return fail("more covariates assigned to roles than generated".into());
        }
        for (name, v) in [
            ("treatment_coef_scale", self.treatment_coef_scale),
            ("outcome_coef_scale", self.outcome_coef_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be a nonnegative finite number"));
            }
        }
        if !(self.baseline_hazard_rate.is_finite() && self.baseline_hazard_rate > 0.0) {
            return fail("baseline_hazard_rate must be positive".into());
        }
        if !(self.censor_rate.is_finite() && self.censor_rate >= 0.0) {
            return fail("censor_rate must be nonnegative".into());
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return fail("t_max must be positive".into());
        }
        if self.n_year_indicators == 1 || self.n_age_bins == 1 {
            return fail("indicator groups need at least two levels".into());
        }
        Ok(())
    }
}

/// Generating parameters drawn alongside a synthetic cohort.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub target_prevalence: BTreeMap<CovariateId, f64>,
    pub treatment_coefs: BTreeMap<CovariateId, f64>,
    pub outcome_coefs: BTreeMap<CovariateId, f64>,
    pub confounders: Vec<CovariateId>,
}

pub fn generate_cohort(config: &GeneratorConfig) -> Result<Cohort> {
    generate_cohort_with_truth(config).map(|(c, _)| c)
}

pub fn generate_cohort_with_truth(config: &GeneratorConfig) -> Result<(Cohort, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_subjects();
    let mut truth = GroundTruth::default();

    let (ln_low, ln_high) = (config.prevalence_range.0.ln(), config.prevalence_range.1.ln());
    let mut columns: BTreeMap<CovariateId, Vec<u32>> = BTreeMap::new();
    for j in 0..config.n_covariates as CovariateId {
        let p = (ln_low + (ln_high - ln_low) * rng.random::<f64>()).exp();
        truth.target_prevalence.insert(j, p);
        columns.insert(j, bernoulli_rows(&mut rng, n, p));
    }

    let mut roles: Vec<CovariateId> = (0..config.n_covariates as CovariateId).collect();
    roles.shuffle(&mut rng);
    let (confounders, rest) = roles.split_at(config.n_confounders);
    let (treatment_only, rest) = rest.split_at(config.n_treatment_only);
    let outcome_only = &rest[..config.n_outcome_only];
    let magnitude = |scale: f64, rng: &mut ChaCha8Rng| scale * (0.5 + rng.random::<f64>());
    for &j in confounders {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let a = magnitude(config.treatment_coef_scale, &mut rng);
        let g = magnitude(config.outcome_coef_scale, &mut rng);
        // opposite signs: confounding pushes the crude estimate below the truth
        truth.treatment_coefs.insert(j, sign * a);
        truth.outcome_coefs.insert(j, -sign * g);
    }
    for &j in treatment_only {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        truth.treatment_coefs.insert(j, sign * magnitude(config.treatment_coef_scale, &mut rng));
    }
    for &j in outcome_only {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        truth.outcome_coefs.insert(j, sign * magnitude(config.outcome_coef_scale, &mut rng));
    }
    let mut confounders = confounders.to_vec();
    confounders.sort_unstable();
    truth.confounders = confounders;

    let mut treat_lp = vec![0.0; n];
    let mut outcome_lp = vec![0.0; n];
    for (&j, &a) in &truth.treatment_coefs {
        for &r in &columns[&j] {
            treat_lp[r as usize] += a;
        }
    }
    for (&j, &g) in &truth.outcome_coefs {
        for &r in &columns[&j] {
            outcome_lp[r as usize] += g;
        }
    }

    // years are strongest at the first level, age bins at the last
    for (group, levels, treat_effect, outcome_effect, decreasing) in [
        (config.age_bin_ids(), config.n_age_bins, config.age_treatment_effect, config.age_outcome_effect, false),
        (config.year_indicator_ids(), config.n_year_indicators, config.year_treatment_effect, 0.0, true),
    ] {
        if levels == 0 {
            continue;
        }
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); levels];
        for r in 0..n {
            rows[rng.random_range(0..levels)].push(r as u32);
        }
        for (level, (id, level_rows)) in group.iter().zip(rows).enumerate() {
            let frac = level as f64 / (levels - 1) as f64;
            let weight = if decreasing { 1.0 - frac } else { frac };
            let (a, g) = (treat_effect * weight, outcome_effect * weight);
            if a != 0.0 {
                truth.treatment_coefs.insert(*id, a);
            }
            if g != 0.0 {
                truth.outcome_coefs.insert(*id, g);
            }
            for &r in &level_rows {
                treat_lp[r as usize] += a;
                outcome_lp[r as usize] += g;
            }
            truth.target_prevalence.insert(*id, 1.0 / levels as f64);
            columns.insert(*id, level_rows);
        }
    }

    // latent logistic assignment; the threshold is the empirical quantile that
    // yields exactly n_treated treated subjects
    let mut latent: Vec<(f64, usize)> = treat_lp
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
            (lp + (u / (1.0 - u)).ln(), i)
        })
        .collect();
    latent.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut treatment = vec![false; n];
    for &(_, i) in latent.iter().take(config.n_treated) {
        treatment[i] = true;
    }

    let mut followup = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let lp = outcome_lp[i] + if treatment[i] { config.treatment_log_hr } else { 0.0 };
        let rate = config.baseline_hazard_rate * lp.exp();
        let t = -(1.0 - rng.random::<f64>()).ln() / rate;
        let c = if config.censor_rate > 0.0 {
            -(1.0 - rng.random::<f64>()).ln() / config.censor_rate
        } else {
            f64::INFINITY
        };
        let time = t.min(c).min(config.t_max);
        followup.push(time);
        event.push(t <= c && t <= config.t_max);
    }

    let cohort = Cohort::new(
        (0..n as SubjectId).collect(),
        treatment,
        followup,
        event,
        config.t_max,
        columns,
    )?;
    Ok((cohort, truth))
}

/// Rows of an iid Bernoulli(p) column, drawn by geometric gap skipping.
fn bernoulli_rows(rng: &mut impl Rng, n: usize, p: f64) -> Vec<u32> {
    let mut rows = Vec::with_capacity((n as f64 * p * 1.1) as usize + 4);
    let log_q = (1.0 - p).ln();
    let mut pos = 0.0f64;
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        pos += (u.ln() / log_q).floor();
        if pos >= n as f64 {
            break;
        }
        rows.push(pos as u32);
        pos += 1.0;
    }
    rows
}

pub fn save_cohort(cohort: &Cohort, subjects_path: &Path, covariates_path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(subjects_path)?);
    writeln!(w, "subject_id,treatment,followup_time,event")?;
    for i in 0..cohort.n_subjects() {
        writeln!(
            w,
            "{},{},{},{}",
            cohort.subject_ids[i],
            u8::from(cohort.treatment[i]),
            cohort.followup_time[i],
            u8::from(cohort.event[i])
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(covariates_path)?);
    writeln!(w, "subject_id,covariate_id")?;
    for (id, rows) in &cohort.columns {
        for &r in rows {
            writeln!(w, "{},{}", cohort.subject_ids[r as usize], id)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a cohort; the administrative horizon is the largest follow-up time.
pub fn load_cohort(subjects_path: &Path, covariates_path: &Path) -> Result<Cohort> {
    load_cohort_with_horizon(subjects_path, covariates_path, None)
}

pub fn load_cohort_with_horizon(
    subjects_path: &Path,
    covariates_path: &Path,
    t_max: Option<f64>,
) -> Result<Cohort> {
    let parse_err = |path: &Path, line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(subjects_path)?;
    let mut records = reader.records();
    expect_header(subjects_path, records.next(), &["subject_id", "treatment", "followup_time", "event"])?;
    let mut ids = Vec::new();
    let mut treatment = Vec::new();
    let mut followup = Vec::new();
    let mut event = Vec::new();
    let mut row_of: HashMap<SubjectId, u32> = HashMap::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 4 {
            return Err(parse_err(subjects_path, line, format!("expected 4 fields, got {}", record.len())));
        }
        let id: SubjectId = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(subjects_path, line, format!("bad subject_id {:?}", &record[0])))?;
        let t = parse_flag(&record[1]).ok_or_else(|| {
            parse_err(subjects_path, line, format!("treatment must be 0 or 1, got {:?}", &record[1]))
        })?;
        let time: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(subjects_path, line, format!("bad followup_time {:?}", &record[2])))?;
        if !(time.is_finite() && time >= 0.0) || t_max.is_some_and(|h| time > h) {
            return Err(parse_err(subjects_path, line, format!("followup_time {time} out of range")));
        }
        let e = parse_flag(&record[3]).ok_or_else(|| {
            parse_err(subjects_path, line, format!("event must be 0 or 1, got {:?}", &record[3]))
        })?;
        if row_of.insert(id, ids.len() as u32).is_some() {
            return Err(parse_err(subjects_path, line, format!("duplicate subject_id {id}")));
        }
        ids.push(id);
        treatment.push(t);
        followup.push(time);
        event.push(e);
    }

    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(covariates_path)?;
    let mut records = reader.records();
    expect_header(covariates_path, records.next(), &["subject_id", "covariate_id"])?;
    let mut columns: BTreeMap<CovariateId, Vec<u32>> = BTreeMap::new();
    for record in records {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 2 {
            return Err(parse_err(covariates_path, line, format!("expected 2 fields, got {}", record.len())));
        }
        let sid: SubjectId = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(covariates_path, line, format!("bad subject_id {:?}", &record[0])))?;
        let cid: CovariateId = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(covariates_path, line, format!("bad covariate_id {:?}", &record[1])))?;
        let row = *row_of.get(&sid).ok_or_else(|| Error::UnknownSubject {
            path: covariates_path.to_path_buf(),
            line,
            subject_id: sid,
        })?;
        columns.entry(cid).or_default().push(row);
    }

    let horizon = t_max.unwrap_or_else(|| followup.iter().copied().fold(0.0, f64::max));
    Cohort::new(ids, treatment, followup, event, horizon, columns)
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn expect_header(
    path: &Path,
    first: Option<csv::Result<csv::StringRecord>>,
    expected: &[&str],
) -> Result<()> {
    let record = first.transpose()?.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty file".into(),
    })?;
    let got: Vec<&str> = record.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, got {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_treated: 150,
            n_comparator: 250,
            n_covariates: 30,
            prevalence_range: (0.05, 0.5),
            n_confounders: 5,
            treatment_coef_scale: 0.5,
            outcome_coef_scale: 0.5,
            baseline_hazard_rate: 0.001,
            censor_rate: 0.0005,
            t_max: 1000.0,
            seed,
            n_treatment_only: 2,
            n_outcome_only: 2,
            treatment_log_hr: 0.0,
            n_age_bins: 0,
            age_treatment_effect: 0.0,
            age_outcome_effect: 0.0,
            n_year_indicators: 0,
            year_treatment_effect: 0.0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cohort(&small_config(3)).unwrap();
        let b = generate_cohort(&small_config(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&small_config(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn exact_arm_counts() {
        let mut cfg = small_config(1);
        cfg.n_treated = 20474;
        cfg.n_comparator = 56648;
        cfg.n_covariates = 10;
        let cohort = generate_cohort(&cfg).unwrap();
        assert_eq!(cohort.n_subjects(), 77122);
        assert_eq!(cohort.n_treated(), 20474);
    }

    #[test]
    fn realized_prevalence_tracks_target() {
        let mut cfg = small_config(11);
        cfg.n_covariates = 100;
        cfg.prevalence_range = (0.01, 0.5);
        cfg.n_treated = 2000;
        cfg.n_comparator = 3000;
        let (cohort, truth) = generate_cohort_with_truth(&cfg).unwrap();
        let n = cohort.n_subjects() as f64;
        for (id, &p) in &truth.target_prevalence {
            let realized = cohort.column(*id).len() as f64 / n;
            let sd = (p * (1.0 - p) / n).sqrt();
            assert!((realized - p).abs() <= 4.0 * sd, "covariate {id}: {realized} vs {p}");
        }
    }

    #[test]
    fn indicator_groups_are_one_hot() {
        let mut cfg = small_config(5);
        cfg.n_age_bins = 4;
        cfg.age_treatment_effect = 0.4;
        cfg.age_outcome_effect = 0.3;
        cfg.n_year_indicators = 5;
        cfg.year_treatment_effect = 1.0;
        let (cohort, truth) = generate_cohort_with_truth(&cfg).unwrap();
        for group in [cfg.age_bin_ids(), cfg.year_indicator_ids()] {
            let total: usize = group.iter().map(|&id| cohort.column(id).len()).sum();
            assert_eq!(total, cohort.n_subjects());
        }
        for id in cfg.year_indicator_ids() {
            assert!(!truth.outcome_coefs.contains_key(&id));
        }
        assert_eq!(truth.treatment_coefs[&cfg.year_indicator_ids()[0]], 1.0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small_config(0);
        cfg.n_treated = 0;
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(0);
        cfg.prevalence_range = (0.3, 0.2);
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(0);
        cfg.prevalence_range = (0.0, 0.2);
        assert!(matches!(generate_cohort(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn prevalence_counts() {
        let mut columns = BTreeMap::new();
        columns.insert(0, (0..100).collect());
        columns.insert(7, (0..10).collect());
        let treat = (0..100).map(|i| i % 2 == 0).collect();
        let cohort = Cohort::new((0..100).collect(), treat, vec![1.0; 100], vec![false; 100], 10.0, columns)
            .unwrap();
        let prev = covariate_prevalence(&cohort);
        assert_eq!(prev[&0], 1.0);
        assert_eq!(prev[&7], 0.1);
    }

    #[test]
    fn prevalence_matches_dense_recount() {
        let mut cfg = small_config(21);
        cfg.n_treated = 20;
        cfg.n_comparator = 30;
        let cohort = generate_cohort(&cfg).unwrap();
        let mut dense = vec![vec![false; 64]; cohort.n_subjects()];
        for (&id, rows) in cohort.columns() {
            for &r in rows {
                dense[r as usize][id as usize] = true;
            }
        }
        let prev = covariate_prevalence(&cohort);
        for (&id, &p) in &prev {
            let count = dense.iter().filter(|row| row[id as usize]).count();
            assert_eq!(p, count as f64 / 50.0);
        }
        let total: f64 = prev.values().sum();
        assert!((total - cohort.n_entries() as f64 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let subjects = dir.path().join("subjects.csv");
        let covariates = dir.path().join("covariates.csv");
        let cohort = generate_cohort(&small_config(8)).unwrap();
        save_cohort(&cohort, &subjects, &covariates).unwrap();
        let back = load_cohort_with_horizon(&subjects, &covariates, Some(cohort.t_max())).unwrap();
        assert_eq!(back, cohort);

        std::fs::write(&subjects, "subject_id,treatment,followup_time,event\n1,1,5,0\n2,0,-1,1\n").unwrap();
        std::fs::write(&covariates, "subject_id,covariate_id\n").unwrap();
        match load_cohort(&subjects, &covariates) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&subjects, "subject_id,treatment,followup_time,event\n1,1,5,0\n2,0,3,1\n").unwrap();
        std::fs::write(&covariates, "subject_id,covariate_id\n1,4\n9,4\n").unwrap();
        match load_cohort(&subjects, &covariates) {
            Err(Error::UnknownSubject { subject_id, line, .. }) => {
                assert_eq!(subject_id, 9);
                assert_eq!(line, 3);
            }
            other => panic!("expected referential error, got {other:?}"),
        }
    }
}
