//! Cox proportional-hazards fits with Breslow tie handling.
//!
//! Risk sets are represented by "buckets": within a stratum, a subject's
//! bucket is the number of distinct event times not after its own time, so
//! the subject belongs to the risk set of every event time whose bucket index
//! is at or below its own. Risk-set sums are then suffix sums over buckets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CovariateId};
use crate::design::{soft_threshold, split_fold, stratified_folds, CvConfig, CvResult, Design, SolverConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFlavor {
    Outcome,
    /// Censoring is the event; outcome events count as censored.
    Censoring,
}

impl EventFlavor {
    pub fn indicator(self, cohort: &Cohort) -> Vec<bool> {
        match self {
            EventFlavor::Outcome => cohort.event().to_vec(),
            EventFlavor::Censoring => cohort.event().iter().map(|&e| !e).collect(),
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            EventFlavor::Outcome => EventFlavor::Censoring,
            EventFlavor::Censoring => EventFlavor::Outcome,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    /// Nonzero covariate coefficients (raw 0/1 scale).
    pub coefficients: BTreeMap<CovariateId, f64>,
    pub lambda: f64,
    pub includes_treatment: bool,
    /// Unpenalized treatment log hazard ratio; 0 when treatment is excluded.
    pub treatment_coef: f64,
    pub event_flavor: EventFlavor,
}

impl CoxModel {
    pub fn coefficient(&self, id: CovariateId) -> f64 {
        self.coefficients.get(&id).copied().unwrap_or(0.0)
    }

    /// Linear predictor of every subject (no centering).
    pub fn linear_predictor(&self, cohort: &Cohort) -> Vec<f64> {
        let mut lp: Vec<f64> = cohort
            .treatment()
            .iter()
            .map(|&t| if t && self.includes_treatment { self.treatment_coef } else { 0.0 })
            .collect();
        for (&id, &b) in &self.coefficients {
            for &r in cohort.column(id) {
                lp[r as usize] += b;
            }
        }
        lp
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Right-continuous nondecreasing step function given by its jump points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::Numerical("step function times and values differ in length".into()));
        }
        let times_ok = times.iter().all(|t| t.is_finite() && *t >= 0.0) && times.windows(2).all(|w| w[0] < w[1]);
        let values_ok = values.iter().all(|v| v.is_finite()) && values.first().is_none_or(|&v| v >= 0.0)
            && values.windows(2).all(|w| w[0] <= w[1]);
        if !times_ok || !values_ok {
            return Err(Error::Numerical(
                "step function needs strictly increasing times and nondecreasing nonnegative values".into(),
            ));
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            0.0
        } else {
            self.values[k - 1]
        }
    }

    /// Scales every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.times.clone(), self.values.iter().map(|v| v * factor).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub log_hr: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub converged: bool,
}

impl EstimationResult {
    pub fn from_estimate(log_hr: f64, se: f64) -> Self {
        Self {
            log_hr,
            se,
            ci_low: log_hr - 1.96 * se,
            ci_high: log_hr + 1.96 * se,
            converged: true,
        }
    }

    fn not_converged(log_hr: f64) -> Self {
        Self {
            log_hr,
            se: f64::INFINITY,
            ci_low: f64::NEG_INFINITY,
            ci_high: f64::INFINITY,
            converged: false,
        }
    }
}

pub(crate) struct RiskIndex {
    bucket: Vec<u32>,
    is_event: Vec<bool>,
    /// Half-open bucket ranges, one per stratum; the first bucket of each
    /// range precedes every event time and belongs to no risk set.
    segments: Vec<(usize, usize)>,
    d: Vec<f64>,
    time: Vec<f64>,
}

impl RiskIndex {
    pub fn new(times: &[f64], events: &[bool], strata: Option<&[u32]>) -> Self {
        let n = times.len();
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            groups.entry(strata.map_or(0, |s| s[i])).or_default().push(i);
        }
        let mut bucket = vec![0u32; n];
        let mut segments = Vec::with_capacity(groups.len());
        let mut d = Vec::new();
        let mut time = Vec::new();
        for rows in groups.values() {
            let mut event_times: Vec<f64> = rows.iter().filter(|&&i| events[i]).map(|&i| times[i]).collect();
            event_times.sort_by(f64::total_cmp);
            event_times.dedup();
            let start = d.len();
            d.push(0.0);
            time.push(f64::NAN);
            d.extend(std::iter::repeat_n(0.0, event_times.len()));
            time.extend_from_slice(&event_times);
            for &i in rows {
                let k = event_times.partition_point(|&t| t <= times[i]);
                bucket[i] = (start + k) as u32;
                if events[i] {
                    d[start + k] += 1.0;
                }
            }
            segments.push((start, d.len()));
        }
        Self {
            bucket,
            is_event: events.to_vec(),
            segments,
            d,
            time,
        }
    }

    fn n_buckets(&self) -> usize {
        self.d.len()
    }

    fn suffix_sums(&self, sums: &mut [f64]) {
        for &(start, end) in &self.segments {
            for k in (start..end - 1).rev() {
                sums[k] += sums[k + 1];
            }
        }
    }

    /// Risk-set totals of `w` at every bucket.
    fn denominators(&self, w: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_buckets()];
        for (i, &b) in self.bucket.iter().enumerate() {
            sums[b as usize] += w[i];
        }
        self.suffix_sums(&mut sums);
        sums
    }

    fn column_sums(&self, rows: &[u32], w: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.n_buckets(), 0.0);
        for &r in rows {
            out[self.bucket[r as usize] as usize] += w[r as usize];
        }
        self.suffix_sums(out);
    }

    fn log_likelihood(&self, eta: &[f64], denom: &[f64]) -> f64 {
        let linear: f64 = eta.iter().zip(&self.is_event).filter(|(_, &e)| e).map(|(x, _)| x).sum();
        let log_denom: f64 = self
            .d
            .iter()
            .zip(denom)
            .filter(|(&d, _)| d > 0.0)
            .map(|(&d, &den)| d * den.ln())
            .sum();
        linear - log_denom
    }
}

struct CoxProblem {
    cols: Vec<Vec<u32>>,
    /// `None` marks the treatment column.
    ids: Vec<Option<CovariateId>>,
    penalty_scale: Vec<f64>,
    conv_scale: Vec<f64>,
    events_in_col: Vec<f64>,
    n: usize,
}

impl CoxProblem {
    fn new(design: Design, treatment_rows: Option<Vec<u32>>, events: &[bool]) -> Self {
        let n = design.n;
        let mut cols = design.cols;
        let mut ids: Vec<Option<CovariateId>> = design.ids.into_iter().map(Some).collect();
        let mut penalty_scale = design.scale.clone();
        let mut conv_scale = design.scale;
        if let Some(rows) = treatment_rows {
            let m = rows.len() as f64 / n as f64;
            cols.push(rows);
            ids.push(None);
            penalty_scale.push(0.0);
            conv_scale.push((m * (1.0 - m)).sqrt());
        }
        let events_in_col = cols
            .iter()
            .map(|c| c.iter().filter(|&&r| events[r as usize]).count() as f64)
            .collect();
        Self {
            cols,
            ids,
            penalty_scale,
            conv_scale,
            events_in_col,
            n,
        }
    }
}

struct CoxState<'a> {
    prob: &'a CoxProblem,
    idx: &'a RiskIndex,
    lambda: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    w: Vec<f64>,
    denom: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> CoxState<'a> {
    fn new(prob: &'a CoxProblem, idx: &'a RiskIndex, lambda: f64, warm: Option<&[f64]>) -> Self {
        let beta = warm.map_or_else(|| vec![0.0; prob.cols.len()], <[f64]>::to_vec);
        let mut eta = vec![0.0; prob.n];
        for (col, &b) in prob.cols.iter().zip(&beta) {
            if b != 0.0 {
                for &r in col {
                    eta[r as usize] += b;
                }
            }
        }
        let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let denom = idx.denominators(&w);
        Self {
            prob,
            idx,
            lambda,
            beta,
            eta,
            w,
            denom,
            scratch: Vec::new(),
        }
    }

    fn refresh(&mut self) {
        for (w, e) in self.w.iter_mut().zip(&self.eta) {
            *w = e.exp();
        }
        self.denom = self.idx.denominators(&self.w);
    }

    fn objective(&self) -> f64 {
        let penalty: f64 = self
            .beta
            .iter()
            .zip(&self.prob.penalty_scale)
            .filter(|(&b, _)| b != 0.0)
            .map(|(b, s)| b.abs() * s)
            .sum();
        -self.idx.log_likelihood(&self.eta, &self.denom) / self.prob.n as f64 + self.lambda * penalty
    }

    /// Score of coordinate `k` (derivative of the log partial likelihood).
    fn score(&mut self, k: usize) -> f64 {
        self.idx.column_sums(&self.prob.cols[k], &self.w, &mut self.scratch);
        let mut expected = 0.0;
        for ((&d, &a), &den) in self.idx.d.iter().zip(&self.scratch).zip(&self.denom) {
            if d > 0.0 && a > 0.0 {
                expected += d * a / den;
            }
        }
        self.prob.events_in_col[k] - expected
    }

    fn coordinate_step(&mut self, k: usize) -> f64 {
        let sd = self.prob.conv_scale[k];
        if sd == 0.0 {
            return 0.0;
        }
        let n = self.prob.n as f64;
        self.idx.column_sums(&self.prob.cols[k], &self.w, &mut self.scratch);
        let (mut expected, mut info) = (0.0, 0.0);
        for ((&d, &a), &den) in self.idx.d.iter().zip(&self.scratch).zip(&self.denom) {
            if d > 0.0 && a > 0.0 {
                let pi = a / den;
                expected += d * pi;
                info += d * pi * (1.0 - pi);
            }
        }
        let g = -(self.prob.events_in_col[k] - expected) / n;
        let h = info / n;
        if h <= 1e-14 {
            return 0.0;
        }
        let beta = self.beta[k];
        let thresh = self.lambda * self.prob.penalty_scale[k];
        // small dead zone so coefficients sitting on the threshold snap to zero
        let z = h * beta - g;
        let snap = thresh > 0.0 && z.abs() <= thresh * (1.0 + 1e-6);
        if snap && beta == 0.0 {
            return 0.0;
        }
        let target = if snap { 0.0 } else { soft_threshold(z, thresh) / h };
        let delta = target - beta;
        if delta == 0.0 {
            return 0.0;
        }
        let ev = self.prob.events_in_col[k];
        let mut t = 1.0;
        for _ in 0..40 {
            let step = t * delta;
            let growth = step.exp_m1();
            let mut change = -step * ev;
            for ((&d, &a), &den) in self.idx.d.iter().zip(&self.scratch).zip(&self.denom) {
                if d > 0.0 && a > 0.0 {
                    change += d * (a / den * growth).ln_1p();
                }
            }
            let change = change / n + thresh * ((beta + step).abs() - beta.abs());
            // landing exactly on zero is accepted up to rounding in the change
            let slack = if t == 1.0 && beta + step == 0.0 { 1e-12 } else { 0.0 };
            if change <= slack {
                self.beta[k] = beta + step;
                let factor = step.exp();
                for &r in &self.prob.cols[k] {
                    self.eta[r as usize] += step;
                    self.w[r as usize] *= factor;
                }
                for (den, &a) in self.denom.iter_mut().zip(&self.scratch) {
                    *den += a * growth;
                }
                return step.abs() * sd;
            }
            t *= 0.5;
        }
        0.0
    }

    fn solve(&mut self, cfg: &SolverConfig, coords: &[usize]) -> bool {
        let mut sweeps = 0;
        while sweeps < cfg.max_sweeps {
            self.refresh();
            let mut max_change: f64 = 0.0;
            for &k in coords {
                max_change = max_change.max(self.coordinate_step(k));
            }
            sweeps += 1;
            if max_change < cfg.tolerance {
                return true;
            }
            let active: Vec<usize> = coords.iter().copied().filter(|&k| self.beta[k] != 0.0).collect();
            loop {
                if sweeps >= cfg.max_sweeps {
                    return false;
                }
                self.refresh();
                let mut max_change: f64 = 0.0;
                for &k in &active {
                    max_change = max_change.max(self.coordinate_step(k));
                }
                sweeps += 1;
                if max_change < cfg.tolerance {
                    break;
                }
            }
        }
        false
    }
}

pub(crate) struct CoxFit {
    beta: Vec<f64>,
}

/// Settings shared by penalized Cox fits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub flavor: EventFlavor,
    /// Adds treatment as an unpenalized covariate.
    pub include_treatment: bool,
    pub solver: SolverConfig,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            flavor: EventFlavor::Outcome,
            include_treatment: false,
            solver: SolverConfig::default(),
        }
    }
}

fn build_problem(cohort: &Cohort, ids: &[CovariateId], rows: Option<&[usize]>, opts: &CoxOptions) -> Result<(CoxProblem, RiskIndex)> {
    let events_all = opts.flavor.indicator(cohort);
    let design = Design::new(cohort, ids, rows)?;
    let all_rows: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all_rows = (0..cohort.n_subjects()).collect();
            &all_rows
        }
    };
    let times: Vec<f64> = rows.iter().map(|&i| cohort.followup_time()[i]).collect();
    let events: Vec<bool> = rows.iter().map(|&i| events_all[i]).collect();
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    let treatment_rows = opts.include_treatment.then(|| {
        rows.iter()
            .enumerate()
            .filter(|(_, &i)| cohort.treatment()[i])
            .map(|(k, _)| k as u32)
            .collect()
    });
    let idx = RiskIndex::new(&times, &events, None);
    Ok((CoxProblem::new(design, treatment_rows, &events), idx))
}

fn solve_cox(prob: &CoxProblem, idx: &RiskIndex, lambda: f64, warm: Option<&[f64]>, cfg: &SolverConfig) -> Result<CoxFit> {
    let mut st = CoxState::new(prob, idx, lambda, warm);
    let coords: Vec<usize> = (0..prob.cols.len()).collect();
    st.solve(cfg, &coords);
    st.refresh();
    let objective = st.objective();
    if !objective.is_finite() {
        return Err(Error::Numerical(format!("Cox objective is {objective}")));
    }
    Ok(CoxFit { beta: st.beta })
}

fn to_cox_model(prob: &CoxProblem, fit: &CoxFit, lambda: f64, opts: &CoxOptions) -> CoxModel {
    let mut coefficients = BTreeMap::new();
    let mut treatment_coef = 0.0;
    for (id, &b) in prob.ids.iter().zip(&fit.beta) {
        match id {
            Some(id) if b != 0.0 => {
                coefficients.insert(*id, b);
            }
            Some(_) => {}
            None => treatment_coef = b,
        }
    }
    CoxModel {
        coefficients,
        lambda,
        includes_treatment: opts.include_treatment,
        treatment_coef,
        event_flavor: opts.flavor,
    }
}

/// L1-penalized Breslow partial likelihood fit:
/// minimizes `-(1/n) * loglik + lambda * sum(sd_j * |beta_j|)`.
pub fn fit_cox_l1(cohort: &Cohort, covariate_set: &[CovariateId], lambda: f64, opts: &CoxOptions) -> Result<CoxModel> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let (prob, idx) = build_problem(cohort, covariate_set, None, opts)?;
    let fit = solve_cox(&prob, &idx, lambda, None, &opts.solver)?;
    Ok(to_cox_model(&prob, &fit, lambda, opts))
}

/// Objective value of a model on a cohort (penalized, mean-scaled).
pub fn cox_objective(cohort: &Cohort, covariate_set: &[CovariateId], model: &CoxModel, opts: &CoxOptions) -> Result<f64> {
    let (prob, idx) = build_problem(cohort, covariate_set, None, opts)?;
    let beta: Vec<f64> = prob
        .ids
        .iter()
        .map(|id| match id {
            Some(id) => model.coefficient(*id),
            None => model.treatment_coef,
        })
        .collect();
    let mut st = CoxState::new(&prob, &idx, model.lambda, Some(&beta));
    st.refresh();
    Ok(st.objective())
}

fn problem_lambda_max(prob: &CoxProblem, idx: &RiskIndex, cfg: &SolverConfig) -> f64 {
    let mut st = CoxState::new(prob, idx, 0.0, None);
    let unpenalized: Vec<usize> = (0..prob.cols.len()).filter(|&k| prob.penalty_scale[k] == 0.0).collect();
    if !unpenalized.is_empty() {
        // a loose optimum here would leave penalized scores just above the threshold
        let tight = SolverConfig {
            tolerance: cfg.tolerance.min(1e-12),
            ..cfg.clone()
        };
        st.solve(&tight, &unpenalized);
        st.refresh();
    }
    let n = prob.n as f64;
    (0..prob.cols.len())
        .filter(|&k| prob.penalty_scale[k] > 0.0)
        .map(|k| (st.score(k) / (n * prob.penalty_scale[k])).abs())
        .fold(0.0, f64::max)
}

/// Smallest penalty at which every covariate coefficient is zero (the
/// treatment coefficient, when included, stays at its unpenalized optimum).
pub fn cox_lambda_max(cohort: &Cohort, covariate_set: &[CovariateId], opts: &CoxOptions) -> Result<f64> {
    let (prob, idx) = build_problem(cohort, covariate_set, None, opts)?;
    Ok(problem_lambda_max(&prob, &idx, &opts.solver))
}

pub fn cross_validate_cox_lambda(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    opts: &CoxOptions,
    cv: &CvConfig,
    seed: u64,
) -> Result<f64> {
    cross_validate_cox_lambda_detailed(cohort, covariate_set, opts, cv, seed).map(|r| r.lambda)
}

pub fn cross_validate_cox_lambda_detailed(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    opts: &CoxOptions,
    cv: &CvConfig,
    seed: u64,
) -> Result<CvResult> {
    cv.validate()?;
    let (full, full_idx) = build_problem(cohort, covariate_set, None, opts)?;
    let grid = cv.grid(problem_lambda_max(&full, &full_idx, &opts.solver));
    let events = opts.flavor.indicator(cohort);
    let fold = stratified_folds(&events, cv, seed)?;
    let ids: Vec<CovariateId> = full.ids.iter().flatten().copied().collect();

    let per_fold: Vec<Result<Vec<f64>>> = (0..cv.n_folds)
        .into_par_iter()
        .map(|k| {
            let (train, test) = split_fold(&fold, k);
            let (prob, idx) = build_problem(cohort, &ids, Some(&train), opts)?;
            let (test_prob, test_idx) = build_problem(cohort, &ids, Some(&test), opts)?;
            let mut warm: Option<Vec<f64>> = None;
            let mut scores = Vec::with_capacity(grid.len());
            for &lambda in &grid {
                let fit = solve_cox(&prob, &idx, lambda, warm.as_deref(), &opts.solver)?;
                let mut st = CoxState::new(&test_prob, &test_idx, 0.0, Some(&fit.beta));
                st.refresh();
                scores.push(test_idx.log_likelihood(&st.eta, &st.denom));
                warm = Some(fit.beta);
            }
            Ok(scores)
        })
        .collect();

    let mut total = vec![0.0; grid.len()];
    for scores in per_fold {
        for (t, s) in total.iter_mut().zip(scores?) {
            *t += s;
        }
    }
    Ok(CvResult::pick(grid, total))
}

/// Breslow cumulative baseline hazard of `model` over `cohort`, using the
/// event indicator of the model's flavor.
pub fn breslow_baseline(model: &CoxModel, cohort: &Cohort) -> Result<StepFunction> {
    let events = model.event_flavor.indicator(cohort);
    let lp = model.linear_predictor(cohort);
    let w: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let idx = RiskIndex::new(cohort.followup_time(), &events, None);
    let denom = idx.denominators(&w);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut cum = 0.0;
    for k in 0..idx.n_buckets() {
        if idx.d[k] > 0.0 {
            cum += idx.d[k] / denom[k];
            times.push(idx.time[k]);
            values.push(cum);
        }
    }
    StepFunction::new(times, values)
}

/// Log partial likelihood (Breslow ties, optional strata) and its gradient
/// in the coefficients of `covariate_set` plus, when `treatment_coef` is
/// given, the treatment coefficient as the last entry.
pub fn partial_log_likelihood(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    beta: &[f64],
    treatment_coef: Option<f64>,
    flavor: EventFlavor,
    strata: Option<&[u32]>,
) -> (f64, Vec<f64>) {
    let events = flavor.indicator(cohort);
    let mut cols: Vec<&[u32]> = covariate_set.iter().map(|&id| cohort.column(id)).collect();
    let treat_rows: Vec<u32> = (0..cohort.n_subjects() as u32).filter(|&i| cohort.treatment()[i as usize]).collect();
    let mut coefs = beta.to_vec();
    if let Some(t) = treatment_coef {
        cols.push(&treat_rows);
        coefs.push(t);
    }
    let mut eta = vec![0.0; cohort.n_subjects()];
    for (col, &b) in cols.iter().zip(&coefs) {
        for &r in *col {
            eta[r as usize] += b;
        }
    }
    let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let idx = RiskIndex::new(cohort.followup_time(), &events, strata);
    let denom = idx.denominators(&w);
    let ll = idx.log_likelihood(&eta, &denom);
    let mut scratch = Vec::new();
    let grad = cols
        .iter()
        .map(|col| {
            idx.column_sums(col, &w, &mut scratch);
            let observed = col.iter().filter(|&&r| events[r as usize]).count() as f64;
            let expected: f64 = idx
                .d
                .iter()
                .zip(&scratch)
                .zip(&denom)
                .filter(|((&d, _), _)| d > 0.0)
                .map(|((&d, &a), &den)| d * a / den)
                .sum();
            observed - expected
        })
        .collect();
    (ll, grad)
}

/// Aggregated risk sets of a single binary treatment covariate.
struct TreatmentRiskSets {
    /// (events, treated at risk, comparators at risk) per event time.
    slots: Vec<(f64, f64, f64)>,
    treated_events: f64,
}

impl TreatmentRiskSets {
    fn new(times: &[f64], events: &[bool], treatment: &[bool], strata: &[u32]) -> Result<Self> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &s) in strata.iter().enumerate() {
            groups.entry(s).or_default().push(i);
        }
        let mut slots = Vec::new();
        let mut treated_events = 0.0;
        let mut informative = false;
        for mut rows in groups.into_values() {
            let has_event = rows.iter().any(|&i| events[i]);
            let n1 = rows.iter().filter(|&&i| treatment[i]).count();
            if rows.len() < 2 || !has_event || n1 == 0 || n1 == rows.len() {
                continue;
            }
            informative = true;
            // descending time; events before censorings at equal times so the
            // running counts include tied subjects when an event time closes
            rows.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
            let (mut at1, mut at0) = (0.0, 0.0);
            let mut k = 0;
            let mut pending: Vec<(f64, f64, f64)> = Vec::new();
            while k < rows.len() {
                let t = times[rows[k]];
                let mut d = 0.0;
                let mut d1 = 0.0;
                while k < rows.len() && times[rows[k]] == t {
                    let i = rows[k];
                    if treatment[i] {
                        at1 += 1.0;
                    } else {
                        at0 += 1.0;
                    }
                    if events[i] {
                        d += 1.0;
                        if treatment[i] {
                            d1 += 1.0;
                        }
                    }
                    k += 1;
                }
                if d > 0.0 {
                    pending.push((d, at1, at0));
                    treated_events += d1;
                }
            }
            slots.extend(pending);
        }
        if !informative {
            return Err(Error::NoInformation);
        }
        // canonical order: sums no longer depend on stratum labels or row order
        slots.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
        Ok(Self { slots, treated_events })
    }

    /// Log-likelihood, score and observed information at `beta`.
    fn evaluate(&self, beta: f64) -> (f64, f64, f64) {
        let e = beta.exp();
        let (mut ll, mut score, mut info) = (beta * self.treated_events, self.treated_events, 0.0);
        for &(d, n1, n0) in &self.slots {
            let den = n0 + n1 * e;
            let pi = n1 * e / den;
            ll -= d * den.ln();
            score -= d * pi;
            info += d * pi * (1.0 - pi);
        }
        (ll, score, info)
    }
}

/// Log partial likelihood of the stratified single-covariate model, with
/// uninformative strata dropped; `None` when no stratum is informative.
pub fn stratified_log_likelihood(
    times: &[f64],
    events: &[bool],
    treatment: &[bool],
    strata: &[u32],
    beta: f64,
) -> Option<(f64, f64, f64)> {
    TreatmentRiskSets::new(times, events, treatment, strata).ok().map(|r| r.evaluate(beta))
}

/// Newton–Raphson fit of the treatment log hazard ratio in a Cox model
/// stratified by `strata`.
pub fn fit_cox_stratified(times: &[f64], events: &[bool], treatment: &[bool], strata: &[u32]) -> Result<EstimationResult> {
    let n = times.len();
    if events.len() != n || treatment.len() != n || strata.len() != n {
        return Err(Error::Config("stratified fit inputs differ in length".into()));
    }
    let rs = TreatmentRiskSets::new(times, events, treatment, strata)?;

    let has_contrast = rs.slots.iter().any(|&(_, n1, n0)| n1 > 0.0 && n0 > 0.0);
    if !has_contrast {
        return Ok(EstimationResult::not_converged(0.0));
    }
    // the score is bounded by these limits as beta runs to -inf / +inf
    let upper: f64 = rs.slots.iter().filter(|s| s.1 > 0.0).map(|s| s.0).sum();
    let lower: f64 = rs.slots.iter().filter(|s| s.2 == 0.0).map(|s| s.0).sum();
    if rs.treated_events >= upper {
        return Ok(EstimationResult::not_converged(f64::INFINITY));
    }
    if rs.treated_events <= lower {
        return Ok(EstimationResult::not_converged(f64::NEG_INFINITY));
    }

    let mut beta = 0.0;
    let (mut ll, mut score, mut info) = rs.evaluate(beta);
    let mut converged = false;
    for _ in 0..100 {
        if info <= 0.0 {
            break;
        }
        let mut step = score / info;
        let mut accepted = false;
        for _ in 0..50 {
            let cand = rs.evaluate(beta + step);
            if cand.0 >= ll {
                beta += step;
                (ll, score, info) = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() < 1e-10 {
            converged = accepted || score.abs() < 1e-8;
            break;
        }
    }
    if !(converged && info > 0.0) {
        return Ok(EstimationResult::not_converged(beta));
    }
    Ok(EstimationResult::from_estimate(beta, 1.0 / info.sqrt()))
}
