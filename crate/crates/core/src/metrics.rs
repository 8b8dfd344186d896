//! Empirical null fitting, covariate balance and bias/coverage summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CovariateId};
use crate::cox::EstimationResult;
use crate::error::{Error, Result};
use crate::matching::MatchResult;
use crate::ps::CovariateSet;

pub const SMD_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub mu: f64,
    pub sigma: f64,
    pub n_controls: usize,
    pub log_likelihood: f64,
    pub converged: bool,
}

/// Log-likelihood of estimates under `N(mu, sigma^2 + se_i^2)`.
pub fn null_log_likelihood(estimates: &[f64], ses: &[f64], mu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    estimates
        .iter()
        .zip(ses)
        .map(|(&x, &t)| {
            let v = s2 + t * t;
            -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - mu).powi(2) / (2.0 * v)
        })
        .sum()
}

/// Gradient and Hessian in `(mu, s)` with `sigma = exp(s)`.
fn derivatives(estimates: &[f64], ses: &[f64], mu: f64, s: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let a = (2.0 * s).exp();
    let (mut g_mu, mut g_s, mut h_mm, mut h_ms, mut h_ss) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&x, &t) in estimates.iter().zip(ses) {
        let v = a + t * t;
        let r = x - mu;
        let q = r * r - v;
        g_mu += r / v;
        g_s += a * q / (v * v);
        h_mm -= 1.0 / v;
        h_ms -= 2.0 * a * r / (v * v);
        h_ss += 2.0 * a * q / (v * v) - 2.0 * a * a / (v * v) - 4.0 * a * a * q / (v * v * v);
    }
    ([g_mu, g_s], [[h_mm, h_ms], [h_ms, h_ss]])
}

fn ensure_controls(estimates: &[f64], ses: &[f64]) -> Result<()> {
    if estimates.len() != ses.len() {
        return Err(Error::Config("estimates and ses lengths differ".into()));
    }
    if estimates.len() < 2 {
        return Err(Error::InsufficientControls(estimates.len()));
    }
    if let Some(t) = ses.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Config(format!("standard error {t} must be positive and finite")));
    }
    if let Some(x) = estimates.iter().find(|x| !x.is_finite()) {
        return Err(Error::Config(format!("estimate {x} is not finite")));
    }
    Ok(())
}

pub fn fit_empirical_null(estimates: &[f64], ses: &[f64]) -> Result<NullDistribution> {
    fit_empirical_null_traced(estimates, ses).map(|(n, _)| n)
}

/// Damped Newton ascent in `(mu, ln sigma)`, compared against the `sigma = 0`
/// boundary optimum. Also returns the objective after every accepted step.
pub fn fit_empirical_null_traced(estimates: &[f64], ses: &[f64]) -> Result<(NullDistribution, Vec<f64>)> {
    ensure_controls(estimates, ses)?;
    let n = estimates.len() as f64;
    let f = |mu: f64, s: f64| null_log_likelihood(estimates, ses, mu, s.exp());

    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let noise = ses.iter().map(|t| t * t).sum::<f64>() / n;
    let (mut mu, mut s) = (mean, (var - noise).max(1e-4).sqrt().ln());
    let mut obj = f(mu, s);
    let mut history = vec![obj];
    let mut converged = false;
    for _ in 0..500 {
        let (g, h) = derivatives(estimates, ses, mu, s);
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        let (mut d_mu, mut d_s) = if h[0][0] < 0.0 && det > 0.0 {
            (
                -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                -(h[0][0] * g[1] - h[0][1] * g[0]) / det,
            )
        } else {
            // not concave here: scaled gradient ascent
            (g[0] / h[0][0].abs().max(1e-12), g[1] / h[1][1].abs().max(1.0))
        };
        let cap = d_mu.abs().max(d_s.abs());
        if cap > 1.0 {
            d_mu /= cap;
            d_s /= cap;
        }
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-12 {
            let (m2, s2) = (mu + step * d_mu, s + step * d_s);
            let o2 = f(m2, s2);
            if o2 >= obj {
                accepted = Some((m2, s2, o2));
                break;
            }
            step *= 0.5;
        }
        let Some((m2, s2, o2)) = accepted else {
            converged = g[0].abs() < 1e-6 && g[1].abs() < 1e-6;
            break;
        };
        let change = o2 - obj;
        mu = m2;
        s = s2;
        obj = o2;
        history.push(obj);
        if change < 1e-10 {
            converged = true;
            break;
        }
        if s < -40.0 {
            // sliding to the boundary; handled below
            converged = true;
            break;
        }
    }

    let w: Vec<f64> = ses.iter().map(|t| 1.0 / (t * t)).collect();
    let mu0 = estimates.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / w.iter().sum::<f64>();
    let obj0 = null_log_likelihood(estimates, ses, mu0, 0.0);
    let null = if obj0 >= obj {
        history.push(obj0);
        NullDistribution {
            mu: mu0,
            sigma: 0.0,
            n_controls: estimates.len(),
            log_likelihood: obj0,
            converged: true,
        }
    } else {
        NullDistribution {
            mu,
            sigma: s.exp(),
            n_controls: estimates.len(),
            log_likelihood: obj,
            converged,
        }
    };
    Ok((null, history))
}

/// Null fit over the converged, finite estimates; also returns how many were
/// excluded.
pub fn fit_empirical_null_from(results: &[EstimationResult]) -> Result<(NullDistribution, usize)> {
    let usable: Vec<&EstimationResult> = results
        .iter()
        .filter(|r| r.converged && r.log_hr.is_finite() && r.se.is_finite() && r.se > 0.0)
        .collect();
    let est: Vec<f64> = usable.iter().map(|r| r.log_hr).collect();
    let ses: Vec<f64> = usable.iter().map(|r| r.se).collect();
    Ok((fit_empirical_null(&est, &ses)?, results.len() - usable.len()))
}

#[derive(Clone, Copy)]
struct ArmTotals {
    treated: f64,
    comparator: f64,
}

fn arm_totals(cohort: &Cohort, weights: Option<&[f64]>) -> Result<ArmTotals> {
    let mut t = ArmTotals {
        treated: 0.0,
        comparator: 0.0,
    };
    for (i, &tr) in cohort.treatment().iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        if tr {
            t.treated += w;
        } else {
            t.comparator += w;
        }
    }
    if !(t.treated > 0.0 && t.comparator > 0.0) {
        return Err(Error::Config("both arms need positive total weight".into()));
    }
    Ok(t)
}

fn smd_with(cohort: &Cohort, id: CovariateId, weights: Option<&[f64]>, totals: ArmTotals) -> f64 {
    let (mut s1, mut s0) = (0.0, 0.0);
    for &r in cohort.column(id) {
        let r = r as usize;
        let w = weights.map_or(1.0, |w| w[r]);
        if cohort.treatment()[r] {
            s1 += w;
        } else {
            s0 += w;
        }
    }
    let p1 = s1 / totals.treated;
    let p0 = s0 / totals.comparator;
    let diff = p1 - p0;
    let pooled = ((p1 * (1.0 - p1) + p0 * (1.0 - p0)) / 2.0).sqrt();
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Standardized mean difference, treated minus comparator, with optional
/// per-subject weights.
pub fn smd(cohort: &Cohort, covariate_id: CovariateId, weights: Option<&[f64]>) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != cohort.n_subjects() {
            return Err(Error::Config("weights length differs from cohort size".into()));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
    }
    let totals = arm_totals(cohort, weights)?;
    Ok(smd_with(cohort, covariate_id, weights, totals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate_id: CovariateId,
    pub smd_before: f64,
    pub smd_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
    /// Rows with `|smd_after| > 0.1`.
    pub n_exceeding: usize,
}

impl BalanceTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["covariate_id", "smd_before", "smd_after"])?;
        for r in &self.rows {
            w.write_record([r.covariate_id.to_string(), r.smd_before.to_string(), r.smd_after.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fraction of rows at or below the threshold after matching.
    pub fn fraction_balanced(&self) -> f64 {
        if self.rows.is_empty() {
            return 1.0;
        }
        1.0 - self.n_exceeding as f64 / self.rows.len() as f64
    }
}

/// Before/after-matching SMDs for every covariate of `covariate_set`.
pub fn balance_table(cohort: &Cohort, covariate_set: &CovariateSet, matched: &MatchResult) -> Result<BalanceTable> {
    let weights = matched.stratum_weights(cohort.n_subjects());
    let before = arm_totals(cohort, None)?;
    let after = arm_totals(cohort, Some(&weights))?;
    let rows: Vec<BalanceRow> = covariate_set
        .ids()
        .iter()
        .map(|&id| BalanceRow {
            covariate_id: id,
            smd_before: smd_with(cohort, id, None, before),
            smd_after: smd_with(cohort, id, Some(&weights), after),
        })
        .collect();
    let n_exceeding = rows.iter().filter(|r| r.smd_after.abs() > SMD_THRESHOLD).count();
    Ok(BalanceTable { rows, n_exceeding })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub mean_bias: f64,
    /// Sample SD of the bias over converged replicates; 0 for a single one.
    pub sd: f64,
    pub n_converged: usize,
    pub n_failed: usize,
}

/// Bias of converged log-HR estimates relative to `ln(true_hr)`.
pub fn bias_summary(estimates: &[EstimationResult], true_hr: f64) -> Result<BiasSummary> {
    let target = true_hr.ln();
    let bias: Vec<f64> = estimates
        .iter()
        .filter(|r| r.converged && r.log_hr.is_finite())
        .map(|r| r.log_hr - target)
        .collect();
    if bias.is_empty() {
        return Err(Error::NoConvergedEstimates);
    }
    let m = bias.len() as f64;
    let mean_bias = bias.iter().sum::<f64>() / m;
    let sd = if bias.len() > 1 {
        (bias.iter().map(|b| (b - mean_bias).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(BiasSummary {
        mean_bias,
        sd,
        n_converged: bias.len(),
        n_failed: estimates.len() - bias.len(),
    })
}

/// Fraction of replicates whose 95% Wald interval contains `ln(true_hr)`.
pub fn coverage(estimates: &[f64], ses: &[f64], true_hr: f64) -> f64 {
    assert_eq!(estimates.len(), ses.len(), "estimates and ses lengths differ");
    if estimates.is_empty() {
        return f64::NAN;
    }
    let target = true_hr.ln();
    let hit = estimates
        .iter()
        .zip(ses)
        .filter(|(&e, &s)| e - 1.96 * s <= target && target <= e + 1.96 * s)
        .count();
    hit as f64 / estimates.len() as f64
}

/// Coverage over the converged results only.
pub fn coverage_of(results: &[EstimationResult], true_hr: f64) -> f64 {
    let (est, ses): (Vec<f64>, Vec<f64>) = results
        .iter()
        .filter(|r| r.converged && r.log_hr.is_finite())
        .map(|r| (r.log_hr, r.se))
        .unzip();
    coverage(&est, &ses, true_hr)
}

pub fn write_estimates_csv(path: &Path, rows: &[(String, EstimationResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "log_hr", "se", "ci_low", "ci_high", "converged"])?;
    for (label, r) in rows {
        w.write_record([
            label.clone(),
            r.log_hr.to_string(),
            r.se.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
