//! L1-regularized logistic regression by cyclic coordinate descent.
//!
//! The objective is `(1/n) * sum(log-loss) + lambda * sum(sd_j * |beta_j|)`
//! with `beta` on the raw 0/1 scale. That is the standardized-column lasso
//! written in raw coefficients: the intercept absorbs the centering, the
//! column standard deviation carries the scaling.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CovariateId};
use crate::design::{soft_threshold, split_fold, stratified_folds, CvConfig, CvResult, Design, SolverConfig};
use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub intercept: f64,
    pub lambda: f64,
    /// Nonzero coefficients on the raw 0/1 scale.
    pub coefficients: BTreeMap<CovariateId, f64>,
    /// Penalized mean negative log-likelihood at the solution.
    #[serde(default)]
    pub objective: f64,
}

impl FittedModel {
    pub fn n_nonzero(&self) -> usize {
        self.coefficients.values().filter(|b| b.abs() > 0.0).count()
    }

    pub fn coefficient(&self, id: CovariateId) -> f64 {
        self.coefficients.get(&id).copied().unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[inline]
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn row_loss(eta: f64, y: bool) -> f64 {
    log1p_exp(eta) - if y { eta } else { 0.0 }
}

pub(crate) struct LogisticFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub objective: f64,
    /// Objective after each sweep.
    pub history: Vec<f64>,
}

struct LogisticState<'a> {
    design: &'a Design,
    y: &'a [bool],
    lambda: f64,
    intercept: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

impl<'a> LogisticState<'a> {
    fn new(design: &'a Design, y: &'a [bool], lambda: f64, warm: Option<(f64, &[f64])>) -> Self {
        let (intercept, beta) = match warm {
            Some((b0, b)) => (b0, b.to_vec()),
            None => {
                let pos = y.iter().filter(|&&v| v).count() as f64;
                ((pos / (y.len() as f64 - pos)).ln(), vec![0.0; design.ids.len()])
            }
        };
        let mut eta = vec![intercept; design.n];
        for (col, &b) in design.cols.iter().zip(&beta) {
            if b != 0.0 {
                for &r in col {
                    eta[r as usize] += b;
                }
            }
        }
        Self {
            design,
            y,
            lambda,
            intercept,
            beta,
            eta,
        }
    }

    fn penalty(&self) -> f64 {
        self.lambda
            * self
                .beta
                .iter()
                .zip(&self.design.scale)
                .map(|(b, s)| b.abs() * s)
                .sum::<f64>()
    }

    fn objective(&self) -> f64 {
        let loss: f64 = self.eta.iter().zip(self.y).map(|(&e, &y)| row_loss(e, y)).sum();
        loss / self.design.n as f64 + self.penalty()
    }
}

const WEIGHT_FLOOR: f64 = 1e-5;

/// Penalized weighted least squares around the current iterate, solved by
/// coordinate descent on weighted-centered columns so the intercept stays
/// exactly optimal. Returns the proposed `(intercept, beta)`.
fn quadratic_step(st: &LogisticState<'_>, cfg: &SolverConfig) -> (f64, Vec<f64>) {
    let design = st.design;
    let n = design.n as f64;
    let mut w = Vec::with_capacity(design.n);
    let mut r = Vec::with_capacity(design.n);
    for (&e, &y) in st.eta.iter().zip(st.y) {
        let p = sigmoid(e);
        let wi = (p * (1.0 - p)).max(WEIGHT_FLOOR);
        w.push(wi);
        r.push((f64::from(u8::from(y)) - p) / wi);
    }
    let total_w: f64 = w.iter().sum();
    let col_w: Vec<f64> = design
        .cols
        .iter()
        .map(|col| col.iter().map(|&i| w[i as usize]).sum())
        .collect();

    let mut b0 = st.intercept;
    let mut beta = st.beta.clone();
    // residuals are stored minus a common shift
    let mut shift = w.iter().zip(&r).map(|(w, r)| w * r).sum::<f64>() / total_w;
    b0 += shift;
    shift = -shift;

    let p = beta.len();
    let update = |j: usize, beta: &mut [f64], b0: &mut f64, r: &mut [f64], shift: &mut f64| -> f64 {
        let sd = design.scale[j];
        let s = col_w[j];
        let h = s * (1.0 - s / total_w) / n;
        if sd == 0.0 || h <= 1e-14 {
            return 0.0;
        }
        let col = &design.cols[j];
        let g = (col.iter().map(|&i| w[i as usize] * r[i as usize]).sum::<f64>() + *shift * s) / n;
        let thresh = st.lambda * sd;
        let old = beta[j];
        if old == 0.0 && g.abs() <= thresh * (1.0 + 1e-10) {
            return 0.0;
        }
        let new = soft_threshold(h * old + g, thresh) / h;
        let delta = new - old;
        if delta == 0.0 {
            return 0.0;
        }
        beta[j] = new;
        for &i in col {
            r[i as usize] -= delta;
        }
        let m = s / total_w;
        *shift += delta * m;
        *b0 -= delta * m;
        delta.abs() * sd
    };

    let mut sweeps = 0;
    'outer: while sweeps < cfg.max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..p {
            max_change = max_change.max(update(j, &mut beta, &mut b0, &mut r, &mut shift));
        }
        sweeps += 1;
        if max_change < cfg.tolerance {
            break;
        }
        // sweep the active set to convergence before the next full pass
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        loop {
            if sweeps >= cfg.max_sweeps {
                break 'outer;
            }
            let mut max_change = 0.0f64;
            for &j in &active {
                max_change = max_change.max(update(j, &mut beta, &mut b0, &mut r, &mut shift));
            }
            sweeps += 1;
            if max_change < cfg.tolerance {
                break;
            }
        }
    }
    (b0, beta)
}

pub(crate) fn solve_logistic(
    design: &Design,
    y: &[bool],
    lambda: f64,
    warm: Option<(f64, &[f64])>,
    cfg: &SolverConfig,
) -> Result<LogisticFit> {
    let mut st = LogisticState::new(design, y, lambda, warm);
    let n = design.n as f64;
    let mut obj = st.objective();
    let mut history = Vec::new();
    for _ in 0..cfg.max_sweeps {
        let (b0, beta) = quadratic_step(&st, cfg);
        let d0 = b0 - st.intercept;
        let d: Vec<f64> = beta.iter().zip(&st.beta).map(|(a, b)| a - b).collect();
        let mut deta = vec![d0; design.n];
        for (col, &dj) in design.cols.iter().zip(&d) {
            if dj != 0.0 {
                for &i in col {
                    deta[i as usize] += dj;
                }
            }
        }
        let direction = d0
            .abs()
            .max(d.iter().zip(&design.scale).map(|(dj, s)| dj.abs() * s).fold(0.0, f64::max));
        if direction == 0.0 {
            history.push(obj);
            break;
        }
        // backtracking on the exact objective keeps the iterates monotone
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let loss: f64 = st
                .eta
                .iter()
                .zip(&deta)
                .zip(y)
                .map(|((&e, &de), &yi)| row_loss(e + t * de, yi))
                .sum();
            let pen: f64 = st
                .beta
                .iter()
                .zip(&d)
                .zip(&design.scale)
                .map(|((b, dj), s)| (b + t * dj).abs() * s)
                .sum();
            let cand = loss / n + lambda * pen;
            if cand <= obj {
                accepted = Some((t, cand));
                break;
            }
            t *= 0.5;
        }
        let Some((t, cand)) = accepted else {
            history.push(obj);
            break;
        };
        st.intercept += t * d0;
        if t == 1.0 {
            st.beta = beta;
        } else {
            for (b, dj) in st.beta.iter_mut().zip(&d) {
                *b += t * dj;
            }
        }
        for (e, de) in st.eta.iter_mut().zip(&deta) {
            *e += t * de;
        }
        obj = cand;
        history.push(obj);
        if t * direction < cfg.tolerance {
            break;
        }
    }
    let objective = st.objective();
    if !objective.is_finite() {
        return Err(Error::Numerical(format!("logistic objective is {objective}")));
    }
    Ok(LogisticFit {
        intercept: st.intercept,
        beta: st.beta,
        objective,
        history,
    })
}

fn check_labels(cohort: &Cohort, labels: &[bool]) -> Result<()> {
    if labels.len() != cohort.n_subjects() {
        return Err(Error::Config(format!(
            "{} labels for {} subjects",
            labels.len(),
            cohort.n_subjects()
        )));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::DegenerateLabels);
    }
    Ok(())
}

fn labels_degenerate(labels: &[bool]) -> bool {
    labels.iter().all(|&y| y) || labels.iter().all(|&y| !y)
}

fn to_model(design: &Design, fit: &LogisticFit, lambda: f64) -> FittedModel {
    FittedModel {
        intercept: fit.intercept,
        lambda,
        coefficients: design
            .ids
            .iter()
            .zip(&fit.beta)
            .filter(|(_, &b)| b != 0.0)
            .map(|(&id, &b)| (id, b))
            .collect(),
        objective: fit.objective,
    }
}

pub fn fit_logistic_l1(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    labels: &[bool],
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<FittedModel> {
    check_labels(cohort, labels)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
    }
    let design = Design::new(cohort, covariate_set, None)?;
    let fit = solve_logistic(&design, labels, lambda, None, cfg)?;
    Ok(to_model(&design, &fit, lambda))
}

/// Same as [`fit_logistic_l1`] but also returns the per-sweep objective trace.
pub fn fit_logistic_l1_traced(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    labels: &[bool],
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<(FittedModel, Vec<f64>)> {
    check_labels(cohort, labels)?;
    let design = Design::new(cohort, covariate_set, None)?;
    let fit = solve_logistic(&design, labels, lambda, None, cfg)?;
    Ok((to_model(&design, &fit, lambda), fit.history))
}

fn design_lambda_max(design: &Design, y: &[bool]) -> f64 {
    let n = design.n as f64;
    let ybar = y.iter().filter(|&&v| v).count() as f64 / n;
    design
        .cols
        .iter()
        .zip(&design.scale)
        .filter(|(_, &s)| s > 0.0)
        .map(|(col, &s)| {
            let hits = col.iter().filter(|&&r| y[r as usize]).count() as f64;
            ((hits - col.len() as f64 * ybar) / (n * s)).abs()
        })
        .fold(0.0, f64::max)
}

/// Smallest penalty at which every covariate coefficient is zero.
pub fn lambda_max(cohort: &Cohort, covariate_set: &[CovariateId], labels: &[bool]) -> Result<f64> {
    check_labels(cohort, labels)?;
    let design = Design::new(cohort, covariate_set, None)?;
    Ok(design_lambda_max(&design, labels))
}

fn heldout_loglik(cohort: &Cohort, ids: &[CovariateId], fit: &LogisticFit, rows: &[usize], y: &[bool]) -> f64 {
    let mut eta = vec![fit.intercept; cohort.n_subjects()];
    for (&id, &b) in ids.iter().zip(&fit.beta) {
        if b != 0.0 {
            for &r in cohort.column(id) {
                eta[r as usize] += b;
            }
        }
    }
    rows.iter().map(|&i| -row_loss(eta[i], y[i])).sum()
}

pub fn cross_validate_lambda(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    labels: &[bool],
    cv: &CvConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<f64> {
    cross_validate_lambda_detailed(cohort, covariate_set, labels, cv, solver, seed).map(|r| r.lambda)
}

pub fn cross_validate_lambda_detailed(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    labels: &[bool],
    cv: &CvConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<CvResult> {
    check_labels(cohort, labels)?;
    cv.validate()?;
    let full = Design::new(cohort, covariate_set, None)?;
    let grid = cv.grid(design_lambda_max(&full, labels));
    let fold = stratified_folds(labels, cv, seed)?;

    let per_fold: Vec<Result<Vec<f64>>> = (0..cv.n_folds)
        .into_par_iter()
        .map(|k| {
            let (train, test) = split_fold(&fold, k);
            let design = Design::new(cohort, &full.ids, Some(&train))?;
            let y_train: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            if labels_degenerate(&y_train) {
                return Err(Error::DegenerateLabels);
            }
            let mut warm: Option<LogisticFit> = None;
            let mut scores = Vec::with_capacity(grid.len());
            for &lambda in &grid {
                let fit = solve_logistic(
                    &design,
                    &y_train,
                    lambda,
                    warm.as_ref().map(|f| (f.intercept, f.beta.as_slice())),
                    solver,
                )?;
                scores.push(heldout_loglik(cohort, &design.ids, &fit, &test, labels));
                warm = Some(fit);
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

/// Per-subject probabilities, clamped to `[1e-12, 1 - 1e-12]`.
pub fn predict_proba(model: &FittedModel, cohort: &Cohort) -> Vec<f64> {
    let mut eta = vec![model.intercept; cohort.n_subjects()];
    for (&id, &b) in &model.coefficients {
        for &r in cohort.column(id) {
            eta[r as usize] += b;
        }
    }
    eta.into_iter()
        .map(|e| sigmoid(e).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
        .collect()
}

/// Unpenalized log-likelihood and its gradient with respect to
/// `(intercept, beta...)`, with `beta` aligned to `covariate_set`.
pub fn logistic_log_likelihood(
    cohort: &Cohort,
    covariate_set: &[CovariateId],
    labels: &[bool],
    intercept: f64,
    beta: &[f64],
) -> (f64, Vec<f64>) {
    let mut eta = vec![intercept; cohort.n_subjects()];
    for (&id, &b) in covariate_set.iter().zip(beta) {
        for &r in cohort.column(id) {
            eta[r as usize] += b;
        }
    }
    let resid: Vec<f64> = eta
        .iter()
        .zip(labels)
        .map(|(&e, &y)| f64::from(u8::from(y)) - sigmoid(e))
        .collect();
    let ll = -eta.iter().zip(labels).map(|(&e, &y)| row_loss(e, y)).sum::<f64>();
    let mut grad = Vec::with_capacity(beta.len() + 1);
    grad.push(resid.iter().sum());
    for &id in covariate_set {
        grad.push(cohort.column(id).iter().map(|&r| resid[r as usize]).sum());
    }
    (ll, grad)
}
