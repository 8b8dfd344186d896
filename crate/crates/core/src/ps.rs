//! Covariate-set strategies, simulated instrument injection and propensity /
//! preference scores.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{covariate_prevalence, Cohort, CovariateId};
use crate::cox::CoxModel;
use crate::design::{CvConfig, SolverConfig};
use crate::error::{Error, Result};
use crate::glm::{cross_validate_lambda, fit_logistic_l1, predict_proba, FittedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyTag {
    All,
    Exclude,
    Hdps,
    CoxNonzero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateSet {
    strategy_tag: StrategyTag,
    ids: Vec<CovariateId>,
}

impl CovariateSet {
    /// Sorted, deduplicated set; every id must exist in `cohort`.
    pub fn new(mut ids: Vec<CovariateId>, strategy_tag: StrategyTag, cohort: &Cohort) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if let Some(bad) = ids.iter().find(|&&id| !cohort.contains_covariate(id)) {
            return Err(Error::Config(format!("covariate {bad} is not present in the cohort")));
        }
        Ok(Self { strategy_tag, ids })
    }

    pub fn ids(&self) -> &[CovariateId] {
        &self.ids
    }

    pub fn strategy_tag(&self) -> StrategyTag {
        self.strategy_tag
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: CovariateId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// The same set plus one extra covariate (a freshly injected instrument).
    pub fn with_covariate(&self, id: CovariateId) -> Self {
        let mut ids = self.ids.clone();
        if let Err(pos) = ids.binary_search(&id) {
            ids.insert(pos, id);
        }
        Self {
            strategy_tag: self.strategy_tag,
            ids,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Every covariate in the cohort except `exclude`.
pub fn select_all(cohort: &Cohort, exclude: &[CovariateId]) -> Result<CovariateSet> {
    if let Some(bad) = exclude.iter().find(|&&id| !cohort.contains_covariate(id)) {
        return Err(Error::Config(format!("excluded covariate {bad} is not present in the cohort")));
    }
    let ids = cohort.covariate_ids().filter(|id| !exclude.contains(id)).collect();
    let tag = if exclude.is_empty() { StrategyTag::All } else { StrategyTag::Exclude };
    CovariateSet::new(ids, tag, cohort)
}

/// Marginal covariate/outcome relative risk with a 0.5 continuity correction
/// on all four cells whenever one of them is empty.
pub fn apparent_relative_risk(exposed_events: usize, exposed: usize, unexposed_events: usize, unexposed: usize) -> f64 {
    let cells = [
        exposed_events,
        exposed - exposed_events,
        unexposed_events,
        unexposed - unexposed_events,
    ];
    let (a, n1, c, n0) = if cells.contains(&0) {
        (
            exposed_events as f64 + 0.5,
            exposed as f64 + 1.0,
            unexposed_events as f64 + 0.5,
            unexposed as f64 + 1.0,
        )
    } else {
        (exposed_events as f64, exposed as f64, unexposed_events as f64, unexposed as f64)
    };
    (a / n1) / (c / n0)
}

/// HDPS screen: the `n_prevalent` most prevalent covariates ranked by
/// `max(RR, 1/RR)` of their apparent relative risk with the outcome; keeps
/// the top `n_select`. Ties go to the smaller covariate id at both stages.
pub fn hdps_screen(cohort: &Cohort, n_prevalent: usize, n_select: usize) -> Result<CovariateSet> {
    let ranked = hdps_ranking(cohort, n_prevalent)?;
    if n_select > n_prevalent {
        return Err(Error::Config(format!("n_select {n_select} exceeds n_prevalent {n_prevalent}")));
    }
    let ids = ranked.into_iter().take(n_select).map(|(id, _)| id).collect();
    CovariateSet::new(ids, StrategyTag::Hdps, cohort)
}

/// Prevalence-screened candidates with their ranking scores, best first.
pub fn hdps_ranking(cohort: &Cohort, n_prevalent: usize) -> Result<Vec<(CovariateId, f64)>> {
    let total_events = cohort.event().iter().filter(|&&e| e).count();
    if total_events == 0 {
        return Err(Error::NoEvents);
    }
    let mut by_prevalence: Vec<(CovariateId, f64)> =
        covariate_prevalence(cohort).into_iter().filter(|&(_, p)| p > 0.0).collect();
    if by_prevalence.len() < n_prevalent {
        return Err(Error::Config(format!(
            "HDPS screen needs {n_prevalent} covariates with nonzero prevalence, cohort has {}",
            by_prevalence.len()
        )));
    }
    by_prevalence.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    by_prevalence.truncate(n_prevalent);

    let n = cohort.n_subjects();
    let events = cohort.event();
    let mut scored: Vec<(CovariateId, f64)> = by_prevalence
        .into_iter()
        .map(|(id, _)| {
            let rows = cohort.column(id);
            let exposed_events = rows.iter().filter(|&&r| events[r as usize]).count();
            let rr = apparent_relative_risk(exposed_events, rows.len(), total_events - exposed_events, n - rows.len());
            (id, rr.max(1.0 / rr))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Covariates with a nonzero coefficient in a fitted outcome model.
pub fn cox_nonzero_set(model: &CoxModel) -> CovariateSet {
    CovariateSet {
        strategy_tag: StrategyTag::CoxNonzero,
        ids: model
            .coefficients
            .iter()
            .filter(|(_, b)| b.abs() > 0.0)
            .map(|(&id, _)| id)
            .collect(),
    }
}

/// Which arm carries the instrument more often.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IvDirection {
    #[default]
    TreatedHigher,
    ComparatorHigher,
}

/// Simulated instrument: overall prevalence plus the ratio of its
/// prevalence in the higher arm to that in the other arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvSpec {
    pub prevalence: f64,
    pub rr: f64,
    #[serde(default)]
    pub direction: IvDirection,
    #[serde(default)]
    pub seed: u64,
}

impl IvSpec {
    /// `(p1, p0)`, treated and comparator carrier fractions.
    pub fn arm_prevalences(&self, n_treated: usize, n_comparator: usize) -> Result<(f64, f64)> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config(format!("IV prevalence {} must lie in (0, 1)", self.prevalence)));
        }
        if !(self.rr.is_finite() && self.rr >= 1.0) {
            return Err(Error::Config(format!("IV relative risk {} must be at least 1", self.rr)));
        }
        let (hi, lo) = match self.direction {
            IvDirection::TreatedHigher => (n_treated as f64, n_comparator as f64),
            IvDirection::ComparatorHigher => (n_comparator as f64, n_treated as f64),
        };
        let p_lo = self.prevalence * (hi + lo) / (self.rr * hi + lo);
        let p_hi = self.rr * p_lo;
        let (p1, p0) = match self.direction {
            IvDirection::TreatedHigher => (p_hi, p_lo),
            IvDirection::ComparatorHigher => (p_lo, p_hi),
        };
        if !(p0 > 0.0 && p0 < 1.0 && p1 > 0.0 && p1 < 1.0) {
            return Err(Error::Config(format!("IV arm prevalences ({p1}, {p0}) leave (0, 1)")));
        }
        Ok((p1, p0))
    }
}

/// Adds one instrument column carried by exactly `round(n1 * p1)` treated
/// and `round(n0 * p0)` comparator subjects. Returns the new cohort and the
/// new covariate id (one past the current largest id).
pub fn inject_iv(cohort: &Cohort, spec: &IvSpec) -> Result<(Cohort, CovariateId)> {
    let treated: Vec<u32> = (0..cohort.n_subjects() as u32).filter(|&i| cohort.treatment()[i as usize]).collect();
    let comparators: Vec<u32> = (0..cohort.n_subjects() as u32).filter(|&i| !cohort.treatment()[i as usize]).collect();
    let (p1, p0) = spec.arm_prevalences(treated.len(), comparators.len())?;
    let k1 = (treated.len() as f64 * p1).round() as usize;
    let k0 = (comparators.len() as f64 * p0).round() as usize;
    if k1 == 0 || k0 == 0 {
        return Err(Error::DegenerateIv(format!(
            "rounded carrier counts are {k1} treated and {k0} comparator"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows: Vec<u32> = sample(&mut rng, treated.len(), k1).into_iter().map(|k| treated[k]).collect();
    rows.extend(sample(&mut rng, comparators.len(), k0).into_iter().map(|k| comparators[k]));
    let id = cohort.max_covariate_id().map_or(0, |m| m + 1);
    Ok((cohort.with_covariate(id, rows)?, id))
}

/// Cross-validated L1 propensity model and the per-subject scores it implies.
pub fn estimate_ps(
    cohort: &Cohort,
    covariate_set: &CovariateSet,
    cv: &CvConfig,
    solver: &SolverConfig,
    cv_seed: u64,
) -> Result<(Vec<f64>, FittedModel)> {
    let labels = cohort.treatment();
    let lambda = cross_validate_lambda(cohort, covariate_set.ids(), labels, cv, solver, cv_seed)?;
    let model = fit_logistic_l1(cohort, covariate_set.ids(), labels, lambda, solver)?;
    Ok((predict_proba(&model, cohort), model))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Propensity scores shifted on the logit scale so that the overall treated
/// fraction maps to 0.5.
pub fn preference_score(ps: &[f64], treated_fraction: f64) -> Vec<f64> {
    let offset = logit(treated_fraction);
    ps.iter()
        .map(|&s| {
            let z = logit(s) - offset;
            if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

/// Fraction of subjects with a preference score in `[low, high]`.
pub fn equipoise_fraction(preference_scores: &[f64], low: f64, high: f64) -> f64 {
    if preference_scores.is_empty() {
        return 0.0;
    }
    let inside = preference_scores.iter().filter(|&&f| (low..=high).contains(&f)).count();
    inside as f64 / preference_scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn cohort_with(columns: BTreeMap<CovariateId, Vec<u32>>, treatment: Vec<bool>, event: Vec<bool>) -> Cohort {
        let n = treatment.len();
        Cohort::new((0..n as u64).collect(), treatment, vec![1.0; n], event, 5.0, columns).unwrap()
    }

    #[test]
    fn relative_risk_by_hand() {
        assert!((apparent_relative_risk(10, 100, 5, 100) - 2.0).abs() < 1e-15);
        // zero cell triggers the correction on all four cells
        let rr = apparent_relative_risk(0, 10, 5, 10);
        assert!((rr - (0.5 / 11.0) / (5.5 / 11.0)).abs() < 1e-15);
    }

    #[test]
    fn hdps_ranks_by_symmetric_score() {
        let n = 200;
        let event: Vec<bool> = (0..n).map(|i| i % 4 == 0).collect();
        let mut columns = BTreeMap::new();
        // protective: 10 carriers, no events among them -> corrected RR well below 1
        columns.insert(1, (1..n as u32).filter(|i| i % 4 != 0).take(40).collect::<Vec<_>>());
        // harmful: event rate 2x
        let harmful: Vec<u32> = (0..n as u32).filter(|i| i % 4 == 0).take(20).chain((1..n as u32).filter(|i| i % 4 != 0).skip(100).take(20)).collect();
        columns.insert(2, harmful);
        // independent of outcome: same rate in both strata (1 in 4)
        columns.insert(3, (0..100).collect());
        let cohort = cohort_with(columns, (0..n).map(|i| i % 3 == 0).collect(), event);
        let ranked = hdps_ranking(&cohort, 3).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!((ranked[2].1 - 1.0).abs() < 1e-12);
        let set = hdps_screen(&cohort, 3, 2).unwrap();
        assert_eq!(set.ids(), &[1, 2]);
        assert!(matches!(hdps_screen(&cohort, 4, 2), Err(Error::Config(_))));
    }

    #[test]
    fn select_all_with_exclusions() {
        let mut columns = BTreeMap::new();
        for j in 0..5 {
            columns.insert(j, vec![j]);
        }
        let cohort = cohort_with(columns, vec![true, false, true, false, true, false], vec![false; 6]);
        let all = select_all(&cohort, &[]).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.strategy_tag(), StrategyTag::All);
        let fewer = select_all(&cohort, &[3]).unwrap();
        assert_eq!(fewer.len(), 4);
        assert!(!fewer.contains(3));
        assert!(select_all(&cohort, &[42]).is_err());
    }

    #[test]
    fn iv_counts() {
        let spec = IvSpec {
            prevalence: 0.1,
            rr: 4.0,
            direction: IvDirection::TreatedHigher,
            seed: 3,
        };
        let (p1, p0) = spec.arm_prevalences(1000, 1000).unwrap();
        assert!((p1 * 1000.0 - 160.0).abs() < 1e-9);
        assert!((p0 * 1000.0 - 40.0).abs() < 1e-9);
        let flat = IvSpec { rr: 1.0, ..spec };
        let (p1, p0) = flat.arm_prevalences(300, 700).unwrap();
        assert!((p1 - 0.1).abs() < 1e-15 && (p0 - 0.1).abs() < 1e-15);
        let flipped = IvSpec {
            direction: IvDirection::ComparatorHigher,
            ..spec
        };
        let (p1, p0) = flipped.arm_prevalences(1000, 1000).unwrap();
        assert!((p1 * 1000.0 - 40.0).abs() < 1e-9 && (p0 * 1000.0 - 160.0).abs() < 1e-9);
    }

    #[test]
    fn iv_injection_preserves_cohort() {
        let n = 2000;
        let mut columns = BTreeMap::new();
        columns.insert(5, (0..n as u32).step_by(3).collect());
        let cohort = cohort_with(columns, (0..n).map(|i| i < 1000).collect(), (0..n).map(|i| i % 7 == 0).collect());
        let spec = IvSpec {
            prevalence: 0.1,
            rr: 4.0,
            direction: IvDirection::TreatedHigher,
            seed: 9,
        };
        let (with_iv, id) = inject_iv(&cohort, &spec).unwrap();
        assert_eq!(id, 6);
        let rows = with_iv.column(id);
        let treated = rows.iter().filter(|&&r| with_iv.treatment()[r as usize]).count();
        assert_eq!(treated, 160);
        assert_eq!(rows.len() - treated, 40);
        assert_eq!(with_iv.column(5), cohort.column(5));
        assert_eq!(with_iv.event(), cohort.event());
        assert_eq!(with_iv.treatment(), cohort.treatment());
        let tiny = IvSpec {
            prevalence: 0.0001,
            rr: 1.5,
            direction: IvDirection::TreatedHigher,
            seed: 1,
        };
        assert!(matches!(inject_iv(&cohort, &tiny), Err(Error::DegenerateIv(_))));
    }

    #[test]
    fn preference_identities() {
        let f = preference_score(&[0.3, 0.9], 0.3);
        assert_eq!(f[0], 0.5);
        let same = preference_score(&[0.9, 0.2, 0.61], 0.5);
        assert!((same[0] - 0.9).abs() < 1e-12);
        assert!((same[1] - 0.2).abs() < 1e-12);
        assert_eq!(equipoise_fraction(&[0.5; 4], 0.3, 0.7), 1.0);
        assert!((equipoise_fraction(&[0.1, 0.5, 0.9], 0.3, 0.7) - 1.0 / 3.0).abs() < 1e-15);
    }
}
