mod common;

use std::collections::BTreeMap;

use common::*;
use ivps_core::cohort::Cohort;
use ivps_core::cox::{
    breslow_baseline, cox_lambda_max, cross_validate_cox_lambda_detailed, fit_cox_l1, fit_cox_stratified, partial_log_likelihood,
    stratified_log_likelihood, CoxOptions, EventFlavor,
};
use ivps_core::design::{CvConfig, SolverConfig};
use ivps_core::glm::{cross_validate_lambda_detailed, fit_logistic_l1, lambda_max, logistic_log_likelihood};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ids(c: &Cohort) -> Vec<u32> {
    c.covariate_ids().collect()
}

fn sd(c: &Cohort, id: u32) -> f64 {
    let q = c.column(id).len() as f64 / c.n_subjects() as f64;
    (q * (1.0 - q)).sqrt()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn logistic_unpenalized_matches_newton_raphson() {
    let c = dense_cohort(50, 5, 0.5, 1);
    let set = ids(&c);
    let oracle = newton_logistic(&dense_matrix(&c, &set), c.treatment());
    let fit = fit_logistic_l1(&c, &set, c.treatment(), 0.0, &SolverConfig::default()).unwrap();
    assert!((fit.intercept - oracle[0]).abs() < 1e-6, "{} vs {}", fit.intercept, oracle[0]);
    for (k, &id) in set.iter().enumerate() {
        assert!((fit.coefficient(id) - oracle[k + 1]).abs() < 1e-6, "beta {id}");
    }
}

#[test]
fn logistic_gradient_matches_central_differences() {
    for seed in 0..5 {
        let c = dense_cohort(20, 4, 0.5, 100 + seed);
        let set = ids(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..=set.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ll = |t: &[f64]| logistic_log_likelihood(&c, &set, c.treatment(), t[0], &t[1..]).0;
        let (_, grad) = logistic_log_likelihood(&c, &set, c.treatment(), theta[0], &theta[1..]);
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (ll(&up) - ll(&dn)) / (2.0 * h);
            assert!(rel_err(grad[k], fd) < 1e-6, "coord {k}: {} vs {fd}", grad[k]);
        }
    }
}

#[test]
fn logistic_kkt_conditions_hold() {
    let c = dense_cohort(400, 12, 0.3, 7);
    let set = ids(&c);
    let lmax = lambda_max(&c, &set, c.treatment()).unwrap();
    let n = c.n_subjects() as f64;
    for frac in [0.5, 0.2, 0.05] {
        let lambda = frac * lmax;
        let fit = fit_logistic_l1(&c, &set, c.treatment(), lambda, &SolverConfig::default()).unwrap();
        let beta: Vec<f64> = set.iter().map(|&id| fit.coefficient(id)).collect();
        let (_, grad) = logistic_log_likelihood(&c, &set, c.treatment(), fit.intercept, &beta);
        assert!(grad[0].abs() / n < 1e-6);
        for (k, &id) in set.iter().enumerate() {
            let score = grad[k + 1] / (n * sd(&c, id));
            if beta[k] != 0.0 {
                assert!((score.abs() - lambda).abs() < 1e-5, "active {id}: {score} vs {lambda}");
                assert_eq!(score.signum(), beta[k].signum());
            } else {
                assert!(score.abs() <= lambda + 1e-5, "inactive {id}: {score} vs {lambda}");
            }
        }
    }
}

#[test]
fn logistic_zero_at_lambda_max() {
    let c = dense_cohort(300, 8, 0.4, 3);
    let set = ids(&c);
    let lmax = lambda_max(&c, &set, c.treatment()).unwrap();
    for lambda in [lmax, 2.0 * lmax] {
        let fit = fit_logistic_l1(&c, &set, c.treatment(), lambda, &SolverConfig::default()).unwrap();
        assert_eq!(fit.n_nonzero(), 0);
        let ybar = c.n_treated() as f64 / c.n_subjects() as f64;
        assert!((fit.intercept - (ybar / (1.0 - ybar)).ln()).abs() < 1e-8);
    }
    let below = fit_logistic_l1(&c, &set, c.treatment(), 0.9 * lmax, &SolverConfig::default()).unwrap();
    assert!(below.n_nonzero() > 0);
}

fn permuted(c: &Cohort, seed: u64) -> Cohort {
    let n = c.n_subjects();
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut inverse = vec![0u32; n];
    for (new, &old) in order.iter().enumerate() {
        inverse[old] = new as u32;
    }
    let columns: BTreeMap<u32, Vec<u32>> = c
        .columns()
        .iter()
        .map(|(&id, rows)| (id, rows.iter().map(|&r| inverse[r as usize]).collect()))
        .collect();
    Cohort::new(
        order.iter().map(|&i| c.subject_ids()[i]).collect(),
        order.iter().map(|&i| c.treatment()[i]).collect(),
        order.iter().map(|&i| c.followup_time()[i]).collect(),
        order.iter().map(|&i| c.event()[i]).collect(),
        c.t_max(),
        columns,
    )
    .unwrap()
}

#[test]
fn fits_are_invariant_to_subject_order() {
    let c = dense_cohort(300, 10, 0.3, 11);
    let p = permuted(&c, 4);
    let set = ids(&c);
    let cfg = SolverConfig::default();
    let lmax = lambda_max(&c, &set, c.treatment()).unwrap();
    let a = fit_logistic_l1(&c, &set, c.treatment(), 0.1 * lmax, &cfg).unwrap();
    let b = fit_logistic_l1(&p, &set, p.treatment(), 0.1 * lmax, &cfg).unwrap();
    assert!((a.intercept - b.intercept).abs() < 1e-8);
    for &id in &set {
        assert!((a.coefficient(id) - b.coefficient(id)).abs() < 1e-8);
    }
    let opts = CoxOptions::default();
    let clmax = cox_lambda_max(&c, &set, &opts).unwrap();
    let ca = fit_cox_l1(&c, &set, 0.1 * clmax, &opts).unwrap();
    let cb = fit_cox_l1(&p, &set, 0.1 * clmax, &opts).unwrap();
    for &id in &set {
        assert!((ca.coefficient(id) - cb.coefficient(id)).abs() < 1e-8);
    }
}

fn noise_cohort(n: usize, p: usize, seed: u64, planted: f64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut x0 = vec![false; n];
    for i in 0..n {
        for j in 0..p {
            if rng.random::<f64>() < 0.3 {
                columns.entry(j as u32).or_default().push(i as u32);
                if j == 0 {
                    x0[i] = true;
                }
            }
        }
    }
    let mut treatment = Vec::with_capacity(n);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for &on in &x0 {
        let eta = if on { planted } else { 0.0 };
        treatment.push(rng.random::<f64>() < 1.0 / (1.0 + (-(eta - 0.5 * planted)).exp()));
        let t_event = -(1.0 - rng.random::<f64>()).ln() / (0.01 * eta.exp());
        let t_censor = -(1.0 - rng.random::<f64>()).ln() / 0.01;
        let t = t_event.min(t_censor).clamp(1e-3, 365.0);
        time.push(t);
        event.push(t_event <= t_censor && t_event <= 365.0);
    }
    Cohort::new((0..n as u64).collect(), treatment, time, event, 365.0, columns).unwrap()
}

#[test]
fn logistic_cv_on_noise_stays_near_lambda_max() {
    let c = noise_cohort(2000, 20, 21, 0.0);
    let res = cross_validate_lambda_detailed(&c, &ids(&c), c.treatment(), &CvConfig::default(), &SolverConfig::default(), 3).unwrap();
    assert!(res.lambda >= res.grid[1], "picked {} of grid {:?}", res.lambda, res.grid);
}

#[test]
fn logistic_cv_keeps_planted_signal() {
    let c = noise_cohort(2000, 20, 22, 2.0);
    let set = ids(&c);
    let res = cross_validate_lambda_detailed(&c, &set, c.treatment(), &CvConfig::default(), &SolverConfig::default(), 3).unwrap();
    assert!(res.lambda < res.grid[0]);
    let fit = fit_logistic_l1(&c, &set, c.treatment(), res.lambda, &SolverConfig::default()).unwrap();
    assert!(fit.coefficient(0) > 1.0);
    let again = cross_validate_lambda_detailed(&c, &set, c.treatment(), &CvConfig::default(), &SolverConfig::default(), 3).unwrap();
    assert_eq!(res, again);
}

#[test]
fn cox_unpenalized_matches_newton_oracle() {
    let c = dense_cohort(20, 2, 0.5, 5);
    let set = ids(&c);
    let x = dense_matrix(&c, &set);
    let oracle = newton_cox(&x, c.followup_time(), c.event());
    let fit = fit_cox_l1(&c, &set, 0.0, &CoxOptions::default()).unwrap();
    for (k, &id) in set.iter().enumerate() {
        assert!((fit.coefficient(id) - oracle[k]).abs() < 1e-5, "{} vs {}", fit.coefficient(id), oracle[k]);
    }
    // the oracle really is a maximum of the explicit risk-set likelihood
    let strata = vec![0; 20];
    let at = naive_cox_loglik(&x, c.followup_time(), c.event(), &strata, &oracle);
    for d in [[1e-3, 0.0], [0.0, 1e-3], [-1e-3, 0.0], [0.0, -1e-3]] {
        let moved = [oracle[0] + d[0], oracle[1] + d[1]];
        assert!(naive_cox_loglik(&x, c.followup_time(), c.event(), &strata, &moved) < at);
    }
}

#[test]
fn cox_gradient_matches_central_differences() {
    for seed in 0..5u64 {
        let c = dense_cohort(25, 3, 0.5, 200 + seed);
        let set = ids(&c);
        let x = dense_matrix(&c, &set);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..set.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let strata: Vec<u32> = (0..25).map(|_| rng.random_range(0..3)).collect();
        for strata in [None, Some(strata.as_slice())] {
            let (ll, grad) = partial_log_likelihood(&c, &set, &beta, None, EventFlavor::Outcome, strata);
            let s = strata.map(|s| s.to_vec()).unwrap_or_else(|| vec![0; 25]);
            let naive = naive_cox_loglik(&x, c.followup_time(), c.event(), &s, &beta);
            assert!(rel_err(ll, naive) < 1e-12);
            let f = |b: &[f64]| partial_log_likelihood(&c, &set, b, None, EventFlavor::Outcome, strata).0;
            let h = 1e-5;
            for k in 0..beta.len() {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                assert!(rel_err(grad[k], fd) < 1e-6, "coord {k}: {} vs {fd}", grad[k]);
            }
        }
    }
}

#[test]
fn stratified_score_and_information_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 10 {
        let (t, e, z, s) = random_strata_instance(&mut rng, 12, 3);
        let Some(_) = stratified_log_likelihood(&t, &e, &z, &s, 0.0) else { continue };
        let beta = rng.random_range(-1.0..1.0);
        let (_, score, info) = stratified_log_likelihood(&t, &e, &z, &s, beta).unwrap();
        let h = 1e-5;
        let (lu, su, _) = stratified_log_likelihood(&t, &e, &z, &s, beta + h).unwrap();
        let (ld, sd, _) = stratified_log_likelihood(&t, &e, &z, &s, beta - h).unwrap();
        let fd_score = (lu - ld) / (2.0 * h);
        let fd_info = -(su - sd) / (2.0 * h);
        if score.abs() > 1e-6 {
            assert!(rel_err(score, fd_score) < 1e-6);
        }
        if info > 1e-6 {
            assert!(rel_err(info, fd_info) < 1e-6);
        }
        checked += 1;
    }
}

#[test]
fn cox_zero_at_lambda_max() {
    let c = dense_cohort(300, 6, 0.4, 13);
    let set = ids(&c);
    for include_treatment in [false, true] {
        let opts = CoxOptions {
            include_treatment,
            ..CoxOptions::default()
        };
        let lmax = cox_lambda_max(&c, &set, &opts).unwrap();
        let fit = fit_cox_l1(&c, &set, lmax, &opts).unwrap();
        assert!(fit.coefficients.is_empty(), "treatment {include_treatment}: {:?}", fit.coefficients);
        let below = fit_cox_l1(&c, &set, 0.8 * lmax, &opts).unwrap();
        assert!(!below.coefficients.is_empty());
    }
}

#[test]
fn cox_kkt_conditions_hold() {
    let c = dense_cohort(400, 8, 0.3, 17);
    let set = ids(&c);
    let opts = CoxOptions::default();
    let lmax = cox_lambda_max(&c, &set, &opts).unwrap();
    let n = c.n_subjects() as f64;
    for frac in [0.5, 0.1] {
        let lambda = frac * lmax;
        let fit = fit_cox_l1(&c, &set, lambda, &opts).unwrap();
        let beta: Vec<f64> = set.iter().map(|&id| fit.coefficient(id)).collect();
        let (_, grad) = partial_log_likelihood(&c, &set, &beta, None, EventFlavor::Outcome, None);
        for (k, &id) in set.iter().enumerate() {
            let score = grad[k] / (n * sd(&c, id));
            if beta[k] != 0.0 {
                assert!((score.abs() - lambda).abs() < 1e-5, "active {id}");
            } else {
                assert!(score.abs() <= lambda + 1e-5, "inactive {id}");
            }
        }
    }
}

#[test]
fn cox_cv_on_noise_and_planted_signal() {
    let cv = CvConfig {
        n_folds: 5,
        ..CvConfig::default()
    };
    let noise = noise_cohort(3000, 15, 31, 0.0);
    let set = ids(&noise);
    let opts = CoxOptions::default();
    let res = cross_validate_cox_lambda_detailed(&noise, &set, &opts, &cv, 2).unwrap();
    assert!(res.lambda >= res.grid[1], "picked {} of {:?}", res.lambda, res.grid);

    let signal = noise_cohort(3000, 15, 32, 1.5);
    let res = cross_validate_cox_lambda_detailed(&signal, &set, &opts, &cv, 2).unwrap();
    assert!(res.lambda < res.grid[0]);
    let fit = fit_cox_l1(&signal, &set, res.lambda, &opts).unwrap();
    assert!(fit.coefficient(0) > 0.7);
    assert_eq!(res, cross_validate_cox_lambda_detailed(&signal, &set, &opts, &cv, 2).unwrap());
}

#[test]
fn stratified_fit_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 10 {
        let (t, e, z, _) = random_strata_instance(&mut rng, 5, 1);
        let s = vec![0u32; 5];
        let Ok(res) = fit_cox_stratified(&t, &e, &z, &s) else { continue };
        if !res.converged {
            continue;
        }
        let x: Vec<Vec<f64>> = z.iter().map(|&v| vec![f64::from(u8::from(v))]).collect();
        let grid = grid_maximize(|b| naive_cox_loglik(&x, &t, &e, &s, &[b]), -20.0, 20.0);
        assert!((res.log_hr - grid).abs() < 1e-6, "{} vs {grid}", res.log_hr);
        checked += 1;
    }
}

#[test]
fn duplicated_strata_shrink_se_by_sqrt_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 10 {
        let (t, e, z, s) = random_strata_instance(&mut rng, 10, 3);
        let Ok(one) = fit_cox_stratified(&t, &e, &z, &s) else { continue };
        if !one.converged {
            continue;
        }
        let t2: Vec<f64> = t.iter().chain(&t).copied().collect();
        let e2: Vec<bool> = e.iter().chain(&e).copied().collect();
        let z2: Vec<bool> = z.iter().chain(&z).copied().collect();
        let s2: Vec<u32> = s.iter().copied().chain(s.iter().map(|&v| v + 10)).collect();
        let two = fit_cox_stratified(&t2, &e2, &z2, &s2).unwrap();
        assert!((one.log_hr - two.log_hr).abs() < 1e-8);
        assert!((one.se / two.se - 2f64.sqrt()).abs() < 1e-6);
        checked += 1;
    }
}

#[test]
fn breslow_final_value_is_sum_of_jumps() {
    let c = dense_cohort(200, 4, 0.4, 41);
    let set = ids(&c);
    let opts = CoxOptions::default();
    let model = fit_cox_l1(&c, &set, 0.0, &opts).unwrap();
    let h = breslow_baseline(&model, &c).unwrap();
    assert!(h.values().windows(2).all(|w| w[0] <= w[1]));
    let lp = model.linear_predictor(&c);
    let times = c.followup_time();
    let mut distinct: Vec<f64> = (0..200).filter(|&i| c.event()[i]).map(|i| times[i]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let expected: f64 = distinct
        .iter()
        .map(|&tk| {
            let d = (0..200).filter(|&i| c.event()[i] && times[i] == tk).count() as f64;
            let denom: f64 = (0..200).filter(|&i| times[i] >= tk).map(|i| lp[i].exp()).sum();
            d / denom
        })
        .sum();
    assert!(rel_err(h.final_value(), expected) < 1e-12);
    assert_eq!(h.times(), distinct.as_slice());
}

#[test]
fn exponential_cohort_baseline_is_linear() {
    let n = 20_000;
    let rate = 0.002;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let time: Vec<f64> = (0..n).map(|_| (-(1.0 - rng.random::<f64>()).ln() / rate).min(365.0)).collect();
    let event: Vec<bool> = time.iter().map(|&t| t < 365.0).collect();
    let c = Cohort::new((0..n as u64).collect(), (0..n).map(|i| i % 2 == 0).collect(), time, event, 365.0, BTreeMap::new()).unwrap();
    let model = fit_cox_l1(&c, &[], 0.0, &CoxOptions::default()).unwrap();
    let h = breslow_baseline(&model, &c).unwrap();
    for t in [50.0, 150.0, 300.0] {
        assert!((h.eval(t) / t - rate).abs() < 0.1 * rate, "H({t}) = {}", h.eval(t));
    }
}
