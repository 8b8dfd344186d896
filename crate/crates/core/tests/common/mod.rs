//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ivps_core::Cohort;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense random cohort: covariate `j` of row `i` is on with probability
/// `density`, treatment follows a logistic model in the first columns and
/// follow-up is exponential with 30% random censoring.
pub fn dense_cohort(n: usize, p: usize, density: f64, seed: u64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<bool>> = (0..n).map(|_| (0..p).map(|_| rng.random::<f64>() < density).collect()).collect();
    let mut treatment = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for row in &x {
        let eta: f64 = row.iter().enumerate().map(|(j, &v)| if v { 0.6 - 0.3 * j as f64 } else { 0.0 }).sum();
        treatment.push(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        let rate = (0.5 * eta).exp();
        let t: f64 = -(1.0 - rng.random::<f64>()).ln() / rate;
        time.push((t * 100.0).round().clamp(1.0, 1000.0));
        event.push(rng.random::<f64>() < 0.7);
    }
    let mut columns: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, row) in x.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v {
                columns.entry(j as u32).or_default().push(i as u32);
            }
        }
    }
    Cohort::new((0..n as u64).collect(), treatment, time, event, 1000.0, columns).unwrap()
}

pub fn dense_matrix(cohort: &Cohort, ids: &[u32]) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<bool>> = ids.iter().map(|&id| cohort.dense_column(id)).collect();
    (0..cohort.n_subjects())
        .map(|i| cols.iter().map(|c| f64::from(u8::from(c[i]))).collect())
        .collect()
}

/// Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Unpenalized logistic MLE by Newton–Raphson; returns `[intercept, beta...]`.
pub fn newton_logistic(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let p = x[0].len() + 1;
    let mut theta = vec![0.0; p];
    for _ in 0..100 {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (row, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            let eta: f64 = z.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let w = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += z[a] * (f64::from(u8::from(yi)) - mu);
                for b in 0..p {
                    hess[a][b] += w * z[a] * z[b];
                }
            }
        }
        let step = solve_linear(hess, grad);
        let size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for (t, s) in theta.iter_mut().zip(&step) {
            *t += s;
        }
        if size < 1e-13 {
            break;
        }
    }
    theta
}

/// Breslow partial log-likelihood by explicit risk-set sums, with strata.
pub fn naive_cox_loglik(x: &[Vec<f64>], time: &[f64], event: &[bool], strata: &[u32], beta: &[f64]) -> f64 {
    let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut ll = 0.0;
    for i in 0..time.len() {
        if !event[i] {
            continue;
        }
        let denom: f64 = (0..time.len())
            .filter(|&j| strata[j] == strata[i] && time[j] >= time[i])
            .map(|j| eta[j].exp())
            .sum();
        ll += eta[i] - denom.ln();
    }
    ll
}

/// Newton–Raphson on [`naive_cox_loglik`] with analytic score and information.
pub fn newton_cox(x: &[Vec<f64>], time: &[f64], event: &[bool]) -> Vec<f64> {
    let n = time.len();
    let p = x[0].len();
    let mut beta = vec![0.0; p];
    for _ in 0..100 {
        let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
        let mut grad = vec![0.0; p];
        let mut info = vec![vec![0.0; p]; p];
        for i in (0..n).filter(|&i| event[i]) {
            let risk: Vec<usize> = (0..n).filter(|&j| time[j] >= time[i]).collect();
            let s0: f64 = risk.iter().map(|&j| eta[j].exp()).sum();
            let s1: Vec<f64> = (0..p).map(|a| risk.iter().map(|&j| eta[j].exp() * x[j][a]).sum()).collect();
            for a in 0..p {
                grad[a] += x[i][a] - s1[a] / s0;
                for b in 0..p {
                    let s2: f64 = risk.iter().map(|&j| eta[j].exp() * x[j][a] * x[j][b]).sum();
                    info[a][b] += s2 / s0 - s1[a] * s1[b] / (s0 * s0);
                }
            }
        }
        let step = solve_linear(info, grad);
        let size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if size < 1e-13 {
            break;
        }
    }
    beta
}

/// Maximizes a unimodal 1-D function on `[lo, hi]` with a coarse grid scan
/// followed by repeated grid refinement around the best point.
pub fn grid_maximize(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut best = lo;
    for _ in 0..40 {
        let step = (hi - lo) / 200.0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..=200 {
            let b = lo + k as f64 * step;
            let v = f(b);
            if v > best_val {
                best_val = v;
                best = b;
            }
        }
        lo = best - step;
        hi = best + step;
        if step < 1e-12 {
            break;
        }
    }
    best
}

/// Random stratified survival instance with `n` subjects in `n_strata` strata.
pub fn random_strata_instance(rng: &mut ChaCha8Rng, n: usize, n_strata: u32) -> (Vec<f64>, Vec<bool>, Vec<bool>, Vec<u32>) {
    let time = (0..n).map(|_| f64::from(rng.random_range(1..=6u32))).collect();
    let event = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    let treatment = (0..n).map(|_| rng.random::<bool>()).collect();
    let strata = (0..n).map(|_| rng.random_range(0..n_strata)).collect();
    (time, event, treatment, strata)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Checks the structural matching contracts: every stratum within the
/// caliper on the matching scale, no row used twice, treated rows matched
/// only to comparator rows, and at most `max_ratio` comparators each.
pub fn check_match(
    ps: &[f64],
    treatment: &[bool],
    result: &ivps_core::MatchResult,
    max_ratio: usize,
    on_logit: bool,
) -> Result<(), String> {
    let metric = |i: usize| if on_logit { logit(ps[i]) } else { ps[i] };
    let mut used = vec![false; ps.len()];
    for s in result.strata() {
        if !treatment[s.treated] {
            return Err(format!("row {} is not treated", s.treated));
        }
        if s.comparators.is_empty() || s.comparators.len() > max_ratio {
            return Err(format!("stratum of {} has {} comparators", s.treated, s.comparators.len()));
        }
        for &r in std::iter::once(&s.treated).chain(&s.comparators) {
            if used[r] {
                return Err(format!("row {r} reused"));
            }
            used[r] = true;
        }
        for &c in &s.comparators {
            if treatment[c] {
                return Err(format!("comparator row {c} is treated"));
            }
            let d = (metric(s.treated) - metric(c)).abs();
            if d > result.caliper_width() {
                return Err(format!("distance {d} exceeds caliper {}", result.caliper_width()));
            }
        }
    }
    Ok(())
}

/// Number of matched treated subjects, zero when nothing overlaps.
pub fn matched_treated(ps: &[f64], treatment: &[bool], cfg: &ivps_core::MatchConfig) -> usize {
    match ivps_core::match_variable_ratio(ps, treatment, cfg) {
        Ok(r) => r.n_matched_treated(),
        Err(ivps_core::Error::NoOverlap) => 0,
        Err(e) => panic!("unexpected matching error: {e}"),
    }
}

/// Random matching instance: PS drawn from two overlapping logit-normal
/// arms, rounded to a coarse grid when `coarse` so that ties occur.
pub fn random_match_instance(rng: &mut ChaCha8Rng, n: usize, coarse: bool) -> (Vec<f64>, Vec<bool>) {
    let treatment: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
    let ps = treatment
        .iter()
        .map(|&t| {
            let z: f64 = rng.random_range(-2.5..2.5) + if t { 0.7 } else { -0.3 };
            let p = 1.0 / (1.0 + (-z).exp());
            if coarse {
                ((p * 40.0).round() / 40.0).clamp(0.0125, 0.9875)
            } else {
                p
            }
        })
        .collect();
    (ps, treatment)
}
