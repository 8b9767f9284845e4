//! CGM traces to daily glycemic metrics, hyper/hypoglycemic events and
//! labeled weekly observations.
//!
//! Every reading represents the interval up to the next reading, capped at
//! `gap_tolerance` minutes; the final reading of a trace represents the
//! trace's nominal cadence. The same weights drive time-in-range fractions
//! and event durations, and a gap longer than `gap_tolerance` ends any run.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    CgmStreams, GlucoseReading, GlycemicFeatures, Minute, PatientMeta, WeeklyObservation,
    WeeklyTable,
};
use crate::Result;

/// High-risk weeks have strictly more than this many severe events.
pub const HIGH_RISK_SEVERE_COUNT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Hyperglycemic event threshold, mg/dL (readings strictly above).
    pub hyper: f64,
    /// Hypoglycemic event threshold, mg/dL (readings strictly below).
    pub hypo: f64,
    /// Severe hyperglycemia level, mg/dL.
    pub severe_hyper: f64,
    /// Minimum severe-event duration, minutes.
    pub severe_min_duration: i64,
    /// Longest inter-reading gap, minutes, that keeps a run alive.
    pub gap_tolerance: i64,
    /// Lower and upper bounds of the target range (inclusive), mg/dL.
    pub range_low: f64,
    pub range_high: f64,
    /// Sensor cadence used for coverage and as a fallback interval, minutes.
    pub expected_cadence: i64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            hyper: 180.0,
            hypo: 70.0,
            severe_hyper: 250.0,
            severe_min_duration: 180,
            gap_tolerance: 30,
            range_low: 70.0,
            range_high: 180.0,
            expected_cadence: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Hyperglycemic,
    Hypoglycemic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Above,
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlycemicEvent {
    pub patient_id: String,
    pub kind: EventKind,
    pub start: Minute,
    pub end: Minute,
    /// Minutes, `end - start`.
    pub duration: i64,
    /// Peak for hyperglycemic events, nadir for hypoglycemic ones.
    pub peak_or_nadir: f64,
    pub severe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentSpec {
    pub threshold: f64,
    pub direction: Direction,
    /// Minimum duration for a run to count as severe, minutes.
    pub min_duration: i64,
    pub gap_tolerance: i64,
    /// Every reading of a severe run must be strictly above this level.
    pub severe_level: f64,
    pub fallback_cadence: i64,
}

impl SegmentSpec {
    pub fn hyper(t: &Thresholds) -> Self {
        Self {
            threshold: t.hyper,
            direction: Direction::Above,
            min_duration: t.severe_min_duration,
            gap_tolerance: t.gap_tolerance,
            severe_level: t.severe_hyper,
            fallback_cadence: t.expected_cadence,
        }
    }

    pub fn severe_hyper(t: &Thresholds) -> Self {
        Self {
            threshold: t.severe_hyper,
            ..Self::hyper(t)
        }
    }

    pub fn hypo(t: &Thresholds) -> Self {
        Self {
            threshold: t.hypo,
            direction: Direction::Below,
            ..Self::hyper(t)
        }
    }
}

/// Median of the positive inter-reading intervals that do not exceed the gap
/// tolerance, or `fallback` when there are none.
pub fn nominal_cadence(trace: &[GlucoseReading], gap_tolerance: i64, fallback: i64) -> i64 {
    let mut gaps: Vec<i64> = trace
        .windows(2)
        .map(|w| w[1].timestamp.0 - w[0].timestamp.0)
        .filter(|&g| g > 0 && g <= gap_tolerance)
        .collect();
    if gaps.is_empty() {
        return fallback.min(gap_tolerance).max(1);
    }
    gaps.sort_unstable();
    gaps[gaps.len() / 2]
}

/// Minutes represented by each reading.
pub fn interval_weights(trace: &[GlucoseReading], gap_tolerance: i64, fallback: i64) -> Vec<i64> {
    let cadence = nominal_cadence(trace, gap_tolerance, fallback);
    (0..trace.len())
        .map(|i| match trace.get(i + 1) {
            Some(next) => (next.timestamp.0 - trace[i].timestamp.0).clamp(0, gap_tolerance),
            None => cadence,
        })
        .collect()
}

/// Maximal runs of readings strictly beyond `spec.threshold`.
pub fn segment_events(trace: &[GlucoseReading], spec: &SegmentSpec) -> Vec<GlycemicEvent> {
    if trace.is_empty() {
        return Vec::new();
    }
    let weights = interval_weights(trace, spec.gap_tolerance, spec.fallback_cadence);
    let beyond = |g: f64| match spec.direction {
        Direction::Above => g > spec.threshold,
        Direction::Below => g < spec.threshold,
    };
    let mut events = Vec::new();
    let mut i = 0;
    while i < trace.len() {
        if !beyond(trace[i].glucose) {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < trace.len()
            && beyond(trace[i + 1].glucose)
            && trace[i + 1].timestamp.0 - trace[i].timestamp.0 <= spec.gap_tolerance
        {
            i += 1;
        }
        let run = &trace[start..=i];
        let end = Minute(trace[i].timestamp.0 + weights[i].max(1));
        let duration = end.0 - trace[start].timestamp.0;
        let (kind, extreme) = match spec.direction {
            Direction::Above => (
                EventKind::Hyperglycemic,
                run.iter().map(|r| r.glucose).fold(f64::MIN, f64::max),
            ),
            Direction::Below => (
                EventKind::Hypoglycemic,
                run.iter().map(|r| r.glucose).fold(f64::MAX, f64::min),
            ),
        };
        let severe = spec.direction == Direction::Above
            && duration >= spec.min_duration
            && run.iter().all(|r| r.glucose > spec.severe_level);
        events.push(GlycemicEvent {
            patient_id: trace[start].patient_id.clone(),
            kind,
            start: trace[start].timestamp,
            end,
            duration,
            peak_or_nadir: extreme,
            severe,
        });
        i += 1;
    }
    events
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyMetrics {
    pub patient_id: String,
    pub date: NaiveDate,
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
    /// Population standard deviation, mg/dL.
    pub sd: f64,
    pub mage: f64,
    pub cv: f64,
    pub mean: f64,
    pub n_readings: usize,
    /// Fraction of the expected readings for a full day, capped at 1.
    pub coverage: f64,
}

/// Classic mean amplitude of glycemic excursions.
///
/// Turning points are the endpoints plus every strict local extremum after
/// collapsing plateaus. Excursions are differences between consecutive
/// turning points; only those larger than one SD count, and only in the
/// direction of the first such excursion.
pub fn mage(values: &[f64], sd: f64) -> f64 {
    if sd <= 0.0 || values.len() < 2 {
        return 0.0;
    }
    let mut v: Vec<f64> = Vec::with_capacity(values.len());
    for &x in values {
        if v.last() != Some(&x) {
            v.push(x);
        }
    }
    if v.len() < 2 {
        return 0.0;
    }
    let mut turning = vec![v[0]];
    for i in 1..v.len() - 1 {
        if (v[i] - v[i - 1]) * (v[i + 1] - v[i]) < 0.0 {
            turning.push(v[i]);
        }
    }
    turning.push(v[v.len() - 1]);
    let excursions: Vec<f64> = turning.windows(2).map(|w| w[1] - w[0]).collect();
    let Some(first) = excursions.iter().find(|d| d.abs() > sd) else {
        return 0.0;
    };
    let up = *first > 0.0;
    let qualifying: Vec<f64> = excursions
        .iter()
        .filter(|d| d.abs() > sd && (**d > 0.0) == up)
        .map(|d| d.abs())
        .collect();
    qualifying.iter().sum::<f64>() / qualifying.len() as f64
}

/// Metrics for one patient-day. Returns `None` for an empty day.
pub fn daily_metrics(day: &[GlucoseReading], t: &Thresholds) -> Option<DailyMetrics> {
    let first = day.first()?;
    let weights = interval_weights(day, t.gap_tolerance, t.expected_cadence);
    let total: i64 = weights.iter().sum();
    let (mut below, mut above, mut within) = (0i64, 0i64, 0i64);
    for (r, &w) in day.iter().zip(&weights) {
        if r.glucose < t.range_low {
            below += w;
        } else if r.glucose > t.range_high {
            above += w;
        } else {
            within += w;
        }
    }
    let (tir, tar, tbr) = if total > 0 {
        let tot = total as f64;
        (within as f64 / tot, above as f64 / tot, below as f64 / tot)
    } else {
        // zero-width weights only happen for a single stamp; classify it
        let g = first.glucose;
        (
            f64::from(u8::from((t.range_low..=t.range_high).contains(&g))),
            f64::from(u8::from(g > t.range_high)),
            f64::from(u8::from(g < t.range_low)),
        )
    };
    let values: Vec<f64> = day.iter().map(|r| r.glucose).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cv = if sd > 0.0 && mean > 0.0 { sd / mean } else { 0.0 };
    let expected = (24 * 60 / t.expected_cadence.max(1)) as f64;
    Some(DailyMetrics {
        patient_id: first.patient_id.clone(),
        date: first.timestamp.date(),
        tir,
        tar,
        tbr,
        sd,
        mage: mage(&values, sd),
        cv,
        mean,
        n_readings: day.len(),
        coverage: (n / expected).min(1.0),
    })
}

/// Events of one patient, split by the series they feed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventSet {
    /// Runs above the hyperglycemic threshold.
    pub hyper: Vec<GlycemicEvent>,
    /// Runs below the hypoglycemic threshold.
    pub hypo: Vec<GlycemicEvent>,
    /// Runs above the severe level; only those flagged severe are counted.
    pub severe: Vec<GlycemicEvent>,
}

impl EventSet {
    pub fn from_trace(trace: &[GlucoseReading], t: &Thresholds) -> Self {
        Self {
            hyper: segment_events(trace, &SegmentSpec::hyper(t)),
            hypo: segment_events(trace, &SegmentSpec::hypo(t)),
            severe: segment_events(trace, &SegmentSpec::severe_hyper(t)),
        }
    }
}

/// Weekly feature vector: reading-count-weighted means of the daily metrics
/// plus event counts, over `[week_start, week_start + 7d)`. Events are placed
/// by their start instant. `None` when no day in the window has data.
pub fn weekly_aggregate(
    days: &[DailyMetrics],
    events: &EventSet,
    week_start: NaiveDate,
) -> Option<GlycemicFeatures> {
    let week_end = week_start + chrono::Duration::days(7);
    let in_week = |d: NaiveDate| d >= week_start && d < week_end;
    let days: Vec<&DailyMetrics> = days.iter().filter(|d| in_week(d.date)).collect();
    let total: usize = days.iter().map(|d| d.n_readings).sum();
    if total == 0 {
        debug!("week {week_start}: no data, no observation emitted");
        return None;
    }
    let wmean = |f: fn(&DailyMetrics) -> f64| {
        days.iter().map(|d| d.n_readings as f64 * f(d)).sum::<f64>() / total as f64
    };
    let count = |evs: &[GlycemicEvent], only_severe: bool| {
        evs.iter()
            .filter(|e| in_week(e.start.date()) && (!only_severe || e.severe))
            .count() as u32
    };
    Some(GlycemicFeatures {
        tir: wmean(|d| d.tir),
        tar: wmean(|d| d.tar),
        tbr: wmean(|d| d.tbr),
        sd: wmean(|d| d.sd),
        mage: wmean(|d| d.mage),
        cv: wmean(|d| d.cv),
        hyper_events: count(&events.hyper, false),
        hypo_events: count(&events.hypo, false),
        severe_hyper_events: count(&events.severe, true),
    })
}

/// 1 iff the week has strictly more than three severe hyperglycemic events.
pub fn label_week(features: &GlycemicFeatures) -> u8 {
    u8::from(features.severe_hyper_events > HIGH_RISK_SEVERE_COUNT)
}

/// Labeled weekly observations of one patient. Weeks are consecutive 7-day
/// windows anchored at the date of the patient's first reading.
pub fn featurize_patient(trace: &[GlucoseReading], t: &Thresholds) -> Vec<WeeklyObservation> {
    let Some(first) = trace.first() else {
        return Vec::new();
    };
    let events = EventSet::from_trace(trace, t);
    let mut by_date: BTreeMap<NaiveDate, Vec<GlucoseReading>> = BTreeMap::new();
    for r in trace {
        by_date.entry(r.timestamp.date()).or_default().push(r.clone());
    }
    let days: Vec<DailyMetrics> = by_date
        .values()
        .filter_map(|d| daily_metrics(d, t))
        .collect();
    let anchor = first.timestamp.date();
    let last = trace[trace.len() - 1].timestamp.date();
    let n_weeks = (last - anchor).num_days() / 7 + 1;
    (0..n_weeks)
        .filter_map(|w| {
            let week_start = anchor + chrono::Duration::days(7 * w);
            weekly_aggregate(&days, &events, week_start).map(|features| WeeklyObservation {
                patient_id: first.patient_id.clone(),
                week_start,
                label: label_week(&features),
                features,
                extras: Vec::new(),
            })
        })
        .collect()
}

/// Raw CGM streams to a labeled weekly table. Patients absent from `meta`
/// get all-missing metadata.
pub fn featurize(
    streams: &CgmStreams,
    meta: &BTreeMap<String, PatientMeta>,
    t: &Thresholds,
) -> Result<WeeklyTable> {
    let per_patient: Vec<Vec<WeeklyObservation>> = streams
        .par_iter()
        .map(|(_, trace)| featurize_patient(trace, t))
        .collect();
    let observations: Vec<WeeklyObservation> = per_patient.into_iter().flatten().collect();
    let patients = streams
        .keys()
        .map(|id| {
            (
                id.clone(),
                meta.get(id)
                    .cloned()
                    .unwrap_or_else(|| PatientMeta::unknown(id)),
            )
        })
        .collect();
    WeeklyTable::new(observations, patients, Vec::new())
}
