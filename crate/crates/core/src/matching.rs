//! Variable-ratio greedy caliper matching without replacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance scale of the matching metric and the caliper.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaliperScale {
    /// Logit(PS), caliper in units of the pooled SD of logit(PS).
    StdLogit,
    /// Logit(PS), caliper as an absolute width.
    Logit,
    /// Raw PS, caliper as an absolute width.
    Ps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub max_ratio: usize,
    pub caliper: f64,
    pub caliper_scale: CaliperScale,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_ratio: 10,
            caliper: 0.2,
            caliper_scale: CaliperScale::StdLogit,
        }
    }
}

/// One treated subject and its comparators, as row indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratum {
    pub treated: usize,
    pub comparators: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    strata: Vec<Stratum>,
    caliper_width: f64,
    scale: CaliperScale,
    n_matched_treated: usize,
    n_matched_comparator: usize,
}

impl MatchResult {
    /// Rejects an empty partition.
    pub fn new(strata: Vec<Stratum>, caliper_width: f64, scale: CaliperScale) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::NoOverlap);
        }
        if let Some(s) = strata.iter().find(|s| s.comparators.is_empty()) {
            return Err(Error::InvalidCohort(format!("stratum of row {} has no comparators", s.treated)));
        }
        let n_matched_comparator = strata.iter().map(|s| s.comparators.len()).sum();
        Ok(Self {
            n_matched_treated: strata.len(),
            n_matched_comparator,
            strata,
            caliper_width,
            scale,
        })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    /// Resolved absolute caliper on the matching scale.
    pub fn caliper_width(&self) -> f64 {
        self.caliper_width
    }

    pub fn scale(&self) -> CaliperScale {
        self.scale
    }

    pub fn n_matched_treated(&self) -> usize {
        self.n_matched_treated
    }

    pub fn n_matched_comparator(&self) -> usize {
        self.n_matched_comparator
    }

    /// Matched rows in ascending order with their stratum index.
    pub fn row_strata(&self) -> (Vec<usize>, Vec<u32>) {
        let mut pairs: Vec<(usize, u32)> = Vec::with_capacity(self.n_matched_treated + self.n_matched_comparator);
        for (k, s) in self.strata.iter().enumerate() {
            pairs.push((s.treated, k as u32));
            pairs.extend(s.comparators.iter().map(|&c| (c, k as u32)));
        }
        pairs.sort_unstable();
        pairs.into_iter().unzip()
    }

    /// Per-row weight: 1 for matched treated, 1/(stratum comparator count)
    /// for matched comparators, 0 for unmatched rows.
    pub fn stratum_weights(&self, n_subjects: usize) -> Vec<f64> {
        let mut w = vec![0.0; n_subjects];
        for s in &self.strata {
            w[s.treated] = 1.0;
            let share = 1.0 / s.comparators.len() as f64;
            for &c in &s.comparators {
                w[c] = share;
            }
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchDiagnostics {
    pub n_strata: usize,
    pub n_matched_treated: usize,
    pub n_matched_comparator: usize,
    pub mean_ratio: f64,
    /// `ratio_histogram[r - 1]` counts strata with `r` comparators.
    pub ratio_histogram: Vec<usize>,
}

pub fn match_diagnostics(result: &MatchResult) -> MatchDiagnostics {
    let max = result.strata.iter().map(|s| s.comparators.len()).max().unwrap_or(0);
    let mut ratio_histogram = vec![0; max];
    for s in &result.strata {
        ratio_histogram[s.comparators.len() - 1] += 1;
    }
    MatchDiagnostics {
        n_strata: result.strata.len(),
        n_matched_treated: result.n_matched_treated,
        n_matched_comparator: result.n_matched_comparator,
        mean_ratio: result.n_matched_comparator as f64 / result.n_matched_treated as f64,
        ratio_histogram,
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (x.len() - 1) as f64).sqrt()
}

/// Union-find over sorted positions that skips matched comparators.
struct Alive {
    right: Vec<usize>,
    left: Vec<usize>,
}

impl Alive {
    fn new(n: usize) -> Self {
        Self {
            right: (0..=n).collect(),
            left: (0..=n).collect(),
        }
    }

    /// Smallest alive position `>= i`, or `n` if none.
    fn next(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.right[root] != root {
            root = self.right[root];
        }
        let mut cur = i;
        while self.right[cur] != root {
            let up = self.right[cur];
            self.right[cur] = root;
            cur = up;
        }
        root
    }

    /// Largest alive position `< i`, or `None`.
    fn prev(&mut self, i: usize) -> Option<usize> {
        // shifted by one so slot 0 is the "none" sentinel
        let mut root = i;
        while self.left[root] != root {
            root = self.left[root];
        }
        let mut cur = i;
        while self.left[cur] != root {
            let up = self.left[cur];
            self.left[cur] = root;
            cur = up;
        }
        root.checked_sub(1)
    }

    fn remove(&mut self, i: usize) {
        self.right[i] = i + 1;
        self.left[i + 1] = i;
    }
}

/// Matching with row indices as the stable tie-break ids.
pub fn match_variable_ratio(ps: &[f64], treatment: &[bool], config: &MatchConfig) -> Result<MatchResult> {
    let ids: Vec<u64> = (0..ps.len() as u64).collect();
    match_with_ids(ps, treatment, &ids, config)
}

/// Round-robin greedy matching. Treated subjects are visited by descending
/// PS (ties to the smaller id); in round k each still-eligible treated
/// subject takes its nearest unmatched comparator within the caliper (ties
/// to the smaller comparator id). Treated subjects without a round-1 match
/// are dropped; a subject that fails in a later round stops growing.
pub fn match_with_ids(ps: &[f64], treatment: &[bool], ids: &[u64], config: &MatchConfig) -> Result<MatchResult> {
    let n = ps.len();
    if treatment.len() != n || ids.len() != n {
        return Err(Error::InvalidCohort("ps, treatment and ids lengths differ".into()));
    }
    if let Some(p) = ps.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidCohort(format!("propensity score {p} outside (0, 1)")));
    }
    if config.max_ratio == 0 {
        return Err(Error::Config("max_ratio must be positive".into()));
    }
    if !(config.caliper >= 0.0 && config.caliper.is_finite()) {
        return Err(Error::Config(format!("caliper {} must be finite and nonnegative", config.caliper)));
    }
    let metric: Vec<f64> = match config.caliper_scale {
        CaliperScale::Ps => ps.to_vec(),
        CaliperScale::Logit | CaliperScale::StdLogit => ps.iter().map(|&p| logit(p)).collect(),
    };
    let width = match config.caliper_scale {
        CaliperScale::StdLogit => config.caliper * sample_sd(&metric),
        _ => config.caliper,
    };

    let mut treated: Vec<usize> = (0..n).filter(|&i| treatment[i]).collect();
    let mut comps: Vec<usize> = (0..n).filter(|&i| !treatment[i]).collect();
    if treated.is_empty() || comps.is_empty() {
        return Err(Error::InvalidCohort("matching needs both arms".into()));
    }
    treated.sort_by(|&a, &b| ps[b].total_cmp(&ps[a]).then(ids[a].cmp(&ids[b])));
    comps.sort_by(|&a, &b| metric[a].total_cmp(&metric[b]).then(ids[a].cmp(&ids[b])));
    let sorted_metric: Vec<f64> = comps.iter().map(|&c| metric[c]).collect();
    let nc = comps.len();
    let mut alive = Alive::new(nc);

    let mut matched: Vec<Vec<usize>> = vec![Vec::new(); treated.len()];
    let mut eligible: Vec<usize> = (0..treated.len()).collect();
    for _round in 0..config.max_ratio {
        let mut still = Vec::with_capacity(eligible.len());
        for &k in &eligible {
            let m = metric[treated[k]];
            let pos = sorted_metric.partition_point(|&v| v < m);
            let right = alive.next(pos);
            let right = (right < nc).then_some(right);
            // among equal-metric comparators the leftmost alive has the smallest id
            let left = alive.prev(pos).map(|l| {
                let lb = sorted_metric.partition_point(|&v| v < sorted_metric[l]);
                alive.next(lb)
            });
            let pick = match (left, right) {
                (None, None) => None,
                (Some(l), None) => Some(l),
                (None, Some(r)) => Some(r),
                (Some(l), Some(r)) => {
                    let dl = m - sorted_metric[l];
                    let dr = sorted_metric[r] - m;
                    if dl < dr || (dl == dr && ids[comps[l]] < ids[comps[r]]) {
                        Some(l)
                    } else {
                        Some(r)
                    }
                }
            };
            if let Some(p) = pick {
                if (sorted_metric[p] - m).abs() <= width {
                    alive.remove(p);
                    matched[k].push(comps[p]);
                    still.push(k);
                }
            }
        }
        if still.is_empty() {
            break;
        }
        eligible = still;
    }

    let strata = treated
        .iter()
        .zip(matched)
        .filter(|(_, c)| !c.is_empty())
        .map(|(&t, comparators)| Stratum { treated: t, comparators })
        .collect();
    MatchResult::new(strata, width, config.caliper_scale)
}
