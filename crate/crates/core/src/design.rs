//! Sparse binary design matrices shared by the logistic and Cox solvers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, CovariateId};
use crate::error::{Error, Result};

/// Coordinate-descent stopping rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Converged once the largest coefficient update of a sweep (standardized
    /// scale) falls below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// Regularization-path cross-validation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub grid_size: usize,
    pub grid_floor_ratio: f64,
    pub max_refolds: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 10,
            grid_size: 20,
            grid_floor_ratio: 1e-3,
            max_refolds: 10,
        }
    }
}

impl CvConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if !(self.grid_floor_ratio > 0.0 && self.grid_floor_ratio <= 1.0) {
            return Err(Error::Config("grid_floor_ratio must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Log-spaced grid from `lambda_max` down to `lambda_max * grid_floor_ratio`.
    pub fn grid(&self, lambda_max: f64) -> Vec<f64> {
        if self.grid_size == 1 {
            return vec![lambda_max];
        }
        (0..self.grid_size)
            .map(|k| {
                let frac = k as f64 / (self.grid_size - 1) as f64;
                lambda_max * self.grid_floor_ratio.powf(frac)
            })
            .collect()
    }
}

/// Outcome of a cross-validated regularization search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Summed out-of-fold log-likelihood at each grid point.
    pub scores: Vec<f64>,
}

impl CvResult {
    pub(crate) fn pick(grid: Vec<f64>, scores: Vec<f64>) -> Self {
        let mut best = 0;
        for (k, &s) in scores.iter().enumerate() {
            // strict improvement only, so ties stay at the larger lambda
            if s > scores[best] {
                best = k;
            }
        }
        Self {
            lambda: grid[best],
            grid,
            scores,
        }
    }
}

pub(crate) struct Design {
    pub n: usize,
    pub ids: Vec<CovariateId>,
    pub cols: Vec<Vec<u32>>,
    /// Population standard deviation of each 0/1 column.
    pub scale: Vec<f64>,
}

impl Design {
    pub fn new(cohort: &Cohort, ids: &[CovariateId], rows: Option<&[usize]>) -> Result<Self> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if let Some(&bad) = ids.iter().find(|&&id| !cohort.contains_covariate(id)) {
            return Err(Error::Config(format!("covariate {bad} is not present in the cohort")));
        }
        let (n, cols) = match rows {
            None => (
                cohort.n_subjects(),
                ids.iter().map(|&id| cohort.column(id).to_vec()).collect::<Vec<_>>(),
            ),
            Some(rows) => {
                let mut remap = vec![u32::MAX; cohort.n_subjects()];
                for (new, &old) in rows.iter().enumerate() {
                    remap[old] = new as u32;
                }
                let cols = ids
                    .iter()
                    .map(|&id| {
                        let mut c: Vec<u32> = cohort
                            .column(id)
                            .iter()
                            .map(|&r| remap[r as usize])
                            .filter(|&r| r != u32::MAX)
                            .collect();
                        c.sort_unstable();
                        c
                    })
                    .collect();
                (rows.len(), cols)
            }
        };
        let scale = cols
            .iter()
            .map(|c: &Vec<u32>| {
                let m = c.len() as f64 / n as f64;
                (m * (1.0 - m)).sqrt()
            })
            .collect();
        Ok(Self { n, ids, cols, scale })
    }
}

pub(crate) fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Label-stratified seeded fold assignment; retried until every fold holds
/// both classes.
pub(crate) fn stratified_folds(labels: &[bool], cv: &CvConfig, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    for _ in 0..=cv.max_refolds {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut fold = vec![0; labels.len()];
        let mut has = vec![(false, false); cv.n_folds];
        for (k, &i) in pos.iter().enumerate() {
            fold[i] = k % cv.n_folds;
            has[k % cv.n_folds].0 = true;
        }
        // continue the round-robin so fold sizes stay balanced overall
        for (k, &i) in neg.iter().enumerate() {
            let f = (k + pos.len()) % cv.n_folds;
            fold[i] = f;
            has[f].1 = true;
        }
        if has.iter().all(|&(a, b)| a && b) {
            return Ok(fold);
        }
    }
    Err(Error::FoldConstruction(cv.max_refolds + 1))
}

/// Rows in fold `k` and rows outside it.
pub(crate) fn split_fold(fold: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::with_capacity(fold.len());
    let mut test = Vec::new();
    for (i, &f) in fold.iter().enumerate() {
        if f == k {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}
