//! Performance, fairness, stability and multiplicity metrics.
//!
//! Every function is pure. A quantity whose precondition fails is
//! [`Metric::Undefined`] with a reason, never a silent zero.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Serialize, Serializer};

use crate::dataio::Group;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Undefined {
    SingleClass,
    NoPositives,
    EmptyGroup,
    EmptySample,
    TooFewPhases,
    TooFewModels,
    NoData,
    Propagated,
    NotRun,
}

impl Undefined {
    pub fn as_str(self) -> &'static str {
        match self {
            Undefined::SingleClass => "single-class",
            Undefined::NoPositives => "no-positives",
            Undefined::EmptyGroup => "empty-group",
            Undefined::EmptySample => "empty-sample",
            Undefined::TooFewPhases => "too-few-phases",
            Undefined::TooFewModels => "too-few-models",
            Undefined::NoData => "no-data",
            Undefined::Propagated => "propagated",
            Undefined::NotRun => "not-run",
        }
    }
}

/// A metric value or the reason it is undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined(Undefined),
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined(_) => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Metric::Value(_))
    }

    /// Combines two defined values; any undefined operand propagates.
    pub fn zip_with(self, other: Metric, f: impl FnOnce(f64, f64) -> f64) -> Metric {
        match (self, other) {
            (Metric::Value(a), Metric::Value(b)) => Metric::Value(f(a, b)),
            (Metric::Undefined(r), _) | (_, Metric::Undefined(r)) => Metric::Undefined(r),
        }
    }
}

impl From<Option<f64>> for Metric {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Metric::Undefined(Undefined::NoData), Metric::Value)
    }
}

/// Values print with shortest round-trip formatting; undefined cells print
/// as `undefined:<reason>`.
impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v}"),
            Metric::Undefined(r) => write!(f, "undefined:{}", r.as_str()),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Metric::Value(v) => s.serialize_f64(*v),
            Metric::Undefined(_) => s.serialize_str(&self.to_string()),
        }
    }
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half. Computed from midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Metric> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(Metric::Undefined(Undefined::SingleClass));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based) midranks of the positives, doubled to stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let twice_midrank = (i + 1 + j + 1) as u128;
        let pos_in_tie = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_midrank * pos_in_tie;
        i = j + 1;
    }
    let p = n_pos as u128;
    // 2U = 2R - n_pos (n_pos + 1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(Metric::Value(
        twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupAuc {
    pub a: Metric,
    pub b: Metric,
    pub gap: Metric,
}

fn split_by_group<'a, T: Copy>(
    values: &'a [T],
    groups: &'a [Option<Group>],
    g: Group,
) -> impl Iterator<Item = (usize, T)> + 'a {
    values
        .iter()
        .zip(groups)
        .enumerate()
        .filter(move |(_, (_, gr))| **gr == Some(g))
        .map(|(i, (v, _))| (i, *v))
}

/// Per-group AUC and the absolute gap between groups. Instances with no
/// group are excluded.
pub fn group_auc_and_gap(
    scores: &[f64],
    labels: &[u8],
    groups: &[Option<Group>],
) -> Result<GroupAuc> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: labels.len().min(groups.len()),
        });
    }
    let per = |g: Group| -> Result<Metric> {
        let (s, y): (Vec<f64>, Vec<u8>) = split_by_group(scores, groups, g)
            .map(|(i, s)| (s, labels[i]))
            .unzip();
        if s.is_empty() {
            return Ok(Metric::Undefined(Undefined::EmptyGroup));
        }
        auc(&s, &y)
    };
    let a = per(Group::A)?;
    let b = per(Group::B)?;
    Ok(GroupAuc {
        a,
        b,
        gap: a.zip_with(b, |x, y| (x - y).abs()),
    })
}

/// Consecutive differences `m[t] - m[t-1]`; a difference touching an
/// undefined entry is undefined.
pub fn delta_series(series: &[Metric]) -> Vec<Metric> {
    series
        .windows(2)
        .map(|w| match (w[0], w[1]) {
            (Metric::Value(a), Metric::Value(b)) => Metric::Value(b - a),
            _ => Metric::Undefined(Undefined::Propagated),
        })
        .collect()
}

/// Absolute difference in true-positive rates between groups.
pub fn eo_gap(preds: &[u8], labels: &[u8], groups: &[Option<Group>]) -> Metric {
    let tpr = |g: Group| -> Metric {
        let (tp, pos) = split_by_group(preds, groups, g)
            .filter(|(i, _)| labels[*i] == 1)
            .fold((0usize, 0usize), |(tp, pos), (_, p)| {
                (tp + usize::from(p == 1), pos + 1)
            });
        if pos == 0 {
            Metric::Undefined(Undefined::NoPositives)
        } else {
            Metric::Value(tp as f64 / pos as f64)
        }
    };
    tpr(Group::A).zip_with(tpr(Group::B), |a, b| (a - b).abs())
}

/// Absolute difference in positive-prediction rates between groups.
pub fn dp_gap(preds: &[u8], groups: &[Option<Group>]) -> Metric {
    let rate = |g: Group| -> Metric {
        let (ones, n) = split_by_group(preds, groups, g)
            .fold((0usize, 0usize), |(o, n), (_, p)| (o + usize::from(p == 1), n + 1));
        if n == 0 {
            Metric::Undefined(Undefined::EmptyGroup)
        } else {
            Metric::Value(ones as f64 / n as f64)
        }
    };
    rate(Group::A).zip_with(rate(Group::B), |a, b| (a - b).abs())
}

/// Unbiased pairwise-agreement estimate from `n_ones` positive predictions
/// among `b` replicas: `[N0(N0-1) + N1(N1-1)] / (B(B-1))`. Not clamped.
pub fn self_consistency_from_counts(n_ones: usize, b: usize) -> Result<f64> {
    if b < 2 {
        return Err(Error::Config(format!(
            "self-consistency needs at least 2 replicas, got {b}"
        )));
    }
    if n_ones > b {
        return Err(Error::Invariant("more positive votes than replicas".into()));
    }
    let n1 = n_ones as f64;
    let n0 = (b - n_ones) as f64;
    let bf = b as f64;
    Ok((n0 * (n0 - 1.0) + n1 * (n1 - 1.0)) / (bf * (bf - 1.0)))
}

/// Self-consistency of one instance from its replica predictions.
pub fn self_consistency(preds: &[u8]) -> Result<f64> {
    self_consistency_from_counts(preds.iter().filter(|&&p| p == 1).count(), preds.len())
}

/// Exact Wasserstein-1 distance between two empirical distributions: the
/// integral of `|F_a(x) - F_b(x)|` over the merged support.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Metric {
    if a.is_empty() || b.is_empty() {
        return Metric::Undefined(Undefined::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut x = a[0].min(b[0]);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => break,
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Metric::Value(total)
}

/// `1 - mean(SC)`.
pub fn overall_arbitrariness(sc: &[f64]) -> Metric {
    match mean(sc) {
        Some(m) => Metric::Value(1.0 - m),
        None => Metric::Undefined(Undefined::EmptySample),
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `(TSC, ΔTSC)` of one instance: the mean SC over phases and the drop from
/// the first to the last phase. `None` for an empty series.
pub fn temporal_sc(series: &[f64]) -> Option<(f64, f64)> {
    let first = *series.first()?;
    let last = *series.last()?;
    Some((mean(series)?, first - last))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipStats {
    /// Per transition `t -> t+1`: `None` when either end is abstained or
    /// missing.
    pub flips: Vec<Option<bool>>,
    pub evaluated: usize,
    pub flipped: usize,
    pub fraction: Metric,
}

/// Prediction flips along one instance's phase series; `None` entries
/// (abstained or not evaluated) mask both adjacent transitions.
pub fn flip_stats(series: &[Option<u8>]) -> FlipStats {
    if series.len() < 2 {
        return FlipStats {
            flips: Vec::new(),
            evaluated: 0,
            flipped: 0,
            fraction: Metric::Undefined(Undefined::TooFewPhases),
        };
    }
    let flips: Vec<Option<bool>> = series
        .windows(2)
        .map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some(a != b),
            _ => None,
        })
        .collect();
    let evaluated = flips.iter().flatten().count();
    let flipped = flips.iter().flatten().filter(|&&f| f).count();
    let fraction = if evaluated == 0 {
        Metric::Undefined(Undefined::TooFewPhases)
    } else {
        Metric::Value(flipped as f64 / evaluated as f64)
    };
    FlipStats {
        flips,
        evaluated,
        flipped,
        fraction,
    }
}

/// Population flip rate at transition `t -> t+1` over instances evaluated
/// at both phases. `series[i][t]` is instance `i`'s prediction at phase `t`.
pub fn flip_rate(series: &[Vec<Option<u8>>], t: usize) -> Metric {
    let (flips, n) = series
        .iter()
        .filter_map(|s| match (s.get(t).copied().flatten(), s.get(t + 1).copied().flatten()) {
            (Some(a), Some(b)) => Some(a != b),
            _ => None,
        })
        .fold((0usize, 0usize), |(f, n), flip| (f + usize::from(flip), n + 1));
    if n == 0 {
        Metric::Undefined(Undefined::NoData)
    } else {
        Metric::Value(flips as f64 / n as f64)
    }
}

/// Least-squares slope of `values` against `0, 1, 2, ...`; 0 for fewer than
/// two points.
pub fn lsq_slope(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let xm = (n as f64 - 1.0) / 2.0;
    let ym = values.iter().sum::<f64>() / n as f64;
    let (num, den) = values
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, den), (i, y)| {
            let dx = i as f64 - xm;
            (num + dx * (y - ym), den + dx * dx)
        });
    num / den
}

/// An individual is unstable by flips when their mean flip fraction is
/// strictly above this.
pub const FLIP_INSTABILITY_THRESHOLD: f64 = 0.20;
/// ...and unstable by self-consistency when the minimum of their mean SC
/// series is strictly below this (or the series trends down).
pub const MIN_SC_THRESHOLD: f64 = 0.75;

/// `(unstable_by_flips, unstable_by_tsc)` for one individual.
pub fn instability_flags(mean_flip_fraction: Option<f64>, sc_series: &[f64]) -> (bool, bool) {
    let by_flips = mean_flip_fraction.is_some_and(|f| f > FLIP_INSTABILITY_THRESHOLD);
    let min_sc = sc_series.iter().copied().fold(f64::INFINITY, f64::min);
    let by_tsc = !sc_series.is_empty() && (lsq_slope(sc_series) < 0.0 || min_sc < MIN_SC_THRESHOLD);
    (by_flips, by_tsc)
}

/// Stability of one evaluation instance across phases.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStability {
    /// SC at each phase where the instance was evaluated.
    pub sc: Vec<f64>,
    pub tsc: f64,
    pub delta_tsc: f64,
    pub flips: FlipStats,
}

impl InstanceStability {
    pub fn new(sc: Vec<f64>, preds: &[Option<u8>]) -> Option<Self> {
        let (tsc, delta_tsc) = temporal_sc(&sc)?;
        Some(Self {
            sc,
            tsc,
            delta_tsc,
            flips: flip_stats(preds),
        })
    }
}

/// Week-level stability averaged to one individual.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndividualStability {
    pub patient_id: String,
    pub mean_flip_fraction: Option<f64>,
    /// Per phase, mean SC over the individual's weeks.
    pub sc_series: Vec<f64>,
    pub min_sc: f64,
    pub sc_slope: f64,
    pub mean_tsc: f64,
    pub unstable_by_flips: bool,
    pub unstable_by_tsc: bool,
}

/// Aggregates an individual's weekly stability records. All weeks must share
/// the same phase count.
pub fn individual_stability(patient_id: &str, weeks: &[&InstanceStability]) -> Option<IndividualStability> {
    let phases = weeks.first()?.sc.len();
    if weeks.iter().any(|w| w.sc.len() != phases) {
        return None;
    }
    let sc_series: Vec<f64> = (0..phases)
        .map(|t| weeks.iter().map(|w| w.sc[t]).sum::<f64>() / weeks.len() as f64)
        .collect();
    let fractions: Vec<f64> = weeks.iter().filter_map(|w| w.flips.fraction.value()).collect();
    let mean_flip_fraction = mean(&fractions);
    let (unstable_by_flips, unstable_by_tsc) = instability_flags(mean_flip_fraction, &sc_series);
    Some(IndividualStability {
        patient_id: patient_id.to_string(),
        mean_flip_fraction,
        min_sc: sc_series.iter().copied().fold(f64::INFINITY, f64::min),
        sc_slope: lsq_slope(&sc_series),
        mean_tsc: weeks.iter().map(|w| w.tsc).sum::<f64>() / weeks.len() as f64,
        sc_series,
        unstable_by_flips,
        unstable_by_tsc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Multiplicity {
    /// Number of distinct prediction vectors.
    pub dpr: usize,
    /// Mean pairwise disagreement rate.
    pub dr: Metric,
}

/// DPR and DR over `M` prediction vectors of equal length `N`.
pub fn multiplicity(vectors: &[Vec<u8>]) -> Result<Multiplicity> {
    let n = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != n) {
        return Err(Error::Invariant("prediction vectors differ in length".into()));
    }
    let dpr = vectors.iter().collect::<BTreeSet<_>>().len();
    let m = vectors.len();
    if m < 2 {
        return Ok(Multiplicity {
            dpr,
            dr: Metric::Undefined(Undefined::TooFewModels),
        });
    }
    if n == 0 {
        return Ok(Multiplicity {
            dpr,
            dr: Metric::Undefined(Undefined::EmptySample),
        });
    }
    let mut total = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            let diff = vectors[a]
                .iter()
                .zip(&vectors[b])
                .filter(|(x, y)| x != y)
                .count();
            total += diff as f64 / n as f64;
        }
    }
    Ok(Multiplicity {
        dpr,
        dr: Metric::Value(2.0 * total / (m * (m - 1)) as f64),
    })
}
