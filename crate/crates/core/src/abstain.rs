//! Distance-based split-conformal abstention.
//!
//! The nonconformity score of a point is its mean Euclidean distance to the
//! `k` nearest rows of a reference set, in the model's standardized feature
//! space. Training rows are split by unit (patient) into a proper-training
//! reference (80%) and a calibration set (20%); the threshold `tau` is the
//! `ceil((1 - alpha)(n_cal + 1))`-th smallest calibration score, so on
//! exchangeable data the abstention rate is at most `alpha` in expectation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::Group;
use crate::seed;
use crate::{Error, Result};

/// Individuals with strictly more than this fraction of abstained weeks are
/// flagged.
pub const HIGH_ABSTENTION_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbstentionConfig {
    pub k: usize,
    /// Abstention budget.
    pub alpha: f64,
    pub calibration_fraction: f64,
}

impl Default for AbstentionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            alpha: 0.05,
            calibration_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abstainer {
    pub k: usize,
    pub alpha: f64,
    pub tau: f64,
    pub reference: Vec<Vec<f64>>,
    /// Sorted ascending.
    pub calibration_distances: Vec<f64>,
}

/// 1-based rank of the conformal quantile, `ceil((1 - alpha)(n + 1))`.
pub fn conformal_rank(alpha: f64, n_cal: usize) -> usize {
    let x = (1.0 - alpha) * (n_cal as f64 + 1.0);
    // absorb representation error such as 95.00000000000001
    (x - 1e-9).ceil().max(1.0) as usize
}

/// Mean of the `k` smallest Euclidean distances from `x` to `reference`
/// (all of them if fewer than `k`). Ties keep the earlier reference row.
pub fn mean_knn_distance(reference: &[Vec<f64>], x: &[f64], k: usize) -> Result<f64> {
    if let Some(r) = reference.first() {
        if r.len() != x.len() {
            return Err(Error::Dimension {
                expected: r.len(),
                got: x.len(),
            });
        }
    }
    let k = k.min(reference.len());
    if k == 0 {
        return Err(Error::Calibration("empty reference set".into()));
    }
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for r in reference {
        let d2: f64 = r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.len() < k || d2 < best[k - 1] {
            let pos = best.partition_point(|&v| v <= d2);
            best.insert(pos, d2);
            best.truncate(k);
        }
    }
    Ok(best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64)
}

impl Abstainer {
    /// Calibrates on standardized training rows. `units[i]` is the
    /// splitting unit (patient) of row `i`; all rows of a unit land on the
    /// same side of the split.
    pub fn calibrate(
        rows: &[Vec<f64>],
        units: &[usize],
        cfg: &AbstentionConfig,
        seed_value: u64,
    ) -> Result<Self> {
        if rows.len() != units.len() {
            return Err(Error::Dimension {
                expected: rows.len(),
                got: units.len(),
            });
        }
        if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1), got {}", cfg.alpha)));
        }
        if cfg.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        let min_rows = 5 * (cfg.k + 1);
        if rows.len() < min_rows {
            return Err(Error::Calibration(format!(
                "{} training rows, need at least {min_rows}",
                rows.len()
            )));
        }
        let mut unit_ids: Vec<usize> = units.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut rng = seed::rng_for(seed_value, &[seed::stream::ABSTAIN]);
        unit_ids.shuffle(&mut rng);
        let n_cal_units = ((unit_ids.len() as f64 * cfg.calibration_fraction).round() as usize)
            .clamp(1, unit_ids.len().saturating_sub(1).max(1));
        let cal_units: BTreeSet<usize> = unit_ids[..n_cal_units].iter().copied().collect();

        let (mut reference, mut calibration) = (Vec::new(), Vec::new());
        for (r, u) in rows.iter().zip(units) {
            if cal_units.contains(u) {
                calibration.push(r.clone());
            } else {
                reference.push(r.clone());
            }
        }
        if reference.len() < cfg.k || calibration.is_empty() {
            return Err(Error::Calibration(format!(
                "split left {} reference and {} calibration rows",
                reference.len(),
                calibration.len()
            )));
        }
        let mut calibration_distances = calibration
            .iter()
            .map(|x| mean_knn_distance(&reference, x, cfg.k))
            .collect::<Result<Vec<_>>>()?;
        calibration_distances.sort_by(f64::total_cmp);
        let rank = conformal_rank(cfg.alpha, calibration_distances.len());
        let tau = calibration_distances
            .get(rank - 1)
            .copied()
            .unwrap_or(f64::INFINITY);
        Ok(Self {
            k: cfg.k,
            alpha: cfg.alpha,
            tau,
            reference,
            calibration_distances,
        })
    }

    pub fn knn_distance(&self, x: &[f64]) -> Result<f64> {
        mean_knn_distance(&self.reference, x, self.k)
    }

    /// `(distance, abstain)`; abstains iff the distance is strictly above tau.
    pub fn decide(&self, x: &[f64]) -> Result<(f64, bool)> {
        let d = self.knn_distance(x)?;
        Ok((d, d > self.tau))
    }
}

/// One logged abstention decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionRecord {
    pub instance: usize,
    pub phase: usize,
    pub distance: f64,
    pub tau: f64,
    pub abstained: bool,
    pub group: Option<Group>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquityRow {
    pub group: Option<Group>,
    pub n_instances: usize,
    pub n_abstained: usize,
    pub abstention_rate: f64,
    pub n_individuals: usize,
    pub n_high_abstention: usize,
    pub pct_high_abstention: f64,
}

/// Strictly more than 10% of an individual's evaluated weeks abstained.
pub fn is_high_abstention(abstained: usize, total: usize) -> bool {
    total > 0 && abstained as f64 / total as f64 > HIGH_ABSTENTION_THRESHOLD
}

/// Per-group abstention rates and high-abstention individual counts.
/// Input items are `(individual, group, abstained)` over every logged
/// decision of one run arm.
pub fn equity_table<'a>(decisions: impl IntoIterator<Item = (&'a str, Option<Group>, bool)>) -> Vec<EquityRow> {
    let mut per_person: BTreeMap<(&str, Option<Group>), (usize, usize)> = BTreeMap::new();
    for (p, g, a) in decisions {
        let e = per_person.entry((p, g)).or_default();
        e.0 += usize::from(a);
        e.1 += 1;
    }
    let mut rows: BTreeMap<Option<Group>, EquityRow> = BTreeMap::new();
    for ((_, g), (abst, total)) in per_person {
        let row = rows.entry(g).or_insert(EquityRow {
            group: g,
            n_instances: 0,
            n_abstained: 0,
            abstention_rate: 0.0,
            n_individuals: 0,
            n_high_abstention: 0,
            pct_high_abstention: 0.0,
        });
        row.n_instances += total;
        row.n_abstained += abst;
        row.n_individuals += 1;
        row.n_high_abstention += usize::from(is_high_abstention(abst, total));
    }
    rows.into_values()
        .map(|mut r| {
            r.abstention_rate = r.n_abstained as f64 / r.n_instances as f64;
            r.pct_high_abstention = 100.0 * r.n_high_abstention as f64 / r.n_individuals as f64;
            r
        })
        .collect()
}
