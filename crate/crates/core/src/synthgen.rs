//! Synthetic cohorts with controllable drift.
//!
//! Weekly tables are generated from three latent glycemic drivers per
//! patient-week (hyperglycemic tendency, hypoglycemic tendency and
//! variability), each a patient random effect plus weekly noise plus an
//! optional linear calendar trend. Features are deterministic transforms of
//! the drivers plus count noise. Labels come from a known logistic model
//! over the standardized features whose intercept is solved so that the
//! cohort-wide high-risk rate equals `base_risk`.
//!
//! Raw CGM traces come from [`gen_trace`], a 5-minute mean-reverting walk
//! with superimposed meal excursions.
//!
//! Every patient draws from its own stream `rng_for(seed, [COHORT, i, ..])`,
//! so output does not depend on the thread schedule.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgmfeat::{self, Thresholds};
use crate::dataio::{
    self, AttrName, CgmStreams, GlucoseReading, GlycemicFeatures, Group, Minute, PatientMeta,
    ProtectedAttr, Sex, WeeklyObservation, WeeklyTable, FEATURE_NAMES,
};
use crate::kv::KvConfig;
use crate::learner::sigmoid;
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Latent drivers that covariate-shift trends act on.
pub const DRIVERS: [&str; 3] = ["hyper", "hypo", "variability"];

const RACE_LABELS: [&str; 4] = ["white", "hispanic", "black", "other"];
const RACE_PROBS: [f64; 4] = [0.6, 0.18, 0.14, 0.08];

/// Default ground-truth coefficients over standardized features, before
/// rescaling to `signal`.
pub const DEFAULT_LABEL_COEF: [f64; 9] = [-0.6, 1.0, 0.2, 0.4, 0.2, 0.3, 0.4, 0.1, 0.8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupDrift {
    pub attribute: AttrName,
    pub group: Group,
    /// Cut value for age and income; cohort median (age, income) or the
    /// default education level when absent.
    pub threshold: Option<f64>,
    /// Added to the linear predictor of affected weeks.
    pub intercept: f64,
    /// Added to the coefficients of affected weeks, indexed like
    /// [`FEATURE_NAMES`].
    pub coef: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Linear trend over calendar fraction per latent driver, indexed like
    /// [`DRIVERS`], in driver standard deviations.
    pub covariate_shift: [f64; 3],
    /// Coefficient change reached at the end of the span; ramps linearly
    /// from zero at `onset`.
    pub concept_drift: [f64; 9],
    /// Applied as a step to weeks at or after `onset`.
    pub subgroup_drift: Option<SubgroupDrift>,
    /// Calendar fraction in [0, 1].
    pub onset: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self {
            covariate_shift: [0.0; 3],
            concept_drift: [0.0; 9],
            subgroup_drift: None,
            onset: 0.5,
        }
    }
}

impl DriftSpec {
    pub fn is_stationary(&self) -> bool {
        self.covariate_shift.iter().all(|&c| c == 0.0)
            && self.concept_drift.iter().all(|&c| c == 0.0)
            && self.subgroup_drift.is_none()
    }

    fn ramp(&self, tau: f64) -> f64 {
        if tau <= self.onset {
            0.0
        } else if self.onset >= 1.0 {
            0.0
        } else {
            (tau - self.onset) / (1.0 - self.onset)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthOutput {
    Weekly,
    Cgm,
}

impl std::str::FromStr for SynthOutput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weekly" => Ok(Self::Weekly),
            "cgm" => Ok(Self::Cgm),
            _ => Err(format!("expected weekly or cgm, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub weeks_min: usize,
    pub weeks_max: usize,
    pub date_span_days: usize,
    pub start_date: NaiveDate,
    pub p_female: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub education_probs: Vec<f64>,
    pub income_probs: Vec<f64>,
    pub base_risk: f64,
    /// Standard deviation of the ground-truth linear predictor, before drift.
    pub signal: f64,
    pub label_coef: [f64; 9],
    pub drift: DriftSpec,
    pub output: SynthOutput,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_patients: 500,
            weeks_min: 2,
            weeks_max: 44,
            date_span_days: 730,
            start_date: NaiveDate::from_ymd_opt(2020, 1, 6).expect("valid date"),
            p_female: 0.5,
            age_min: 2.0,
            age_max: 19.0,
            education_probs: vec![0.05, 0.25, 0.25, 0.3, 0.15],
            income_probs: vec![0.2, 0.2, 0.2, 0.2, 0.2],
            base_risk: 0.2,
            signal: 3.0,
            label_coef: DEFAULT_LABEL_COEF,
            drift: DriftSpec::default(),
            output: SynthOutput::Weekly,
            seed: 0,
        }
    }
}

fn check_probs(name: &str, probs: &[f64]) -> Result<()> {
    if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config(format!("{name}: probabilities must lie in [0,1]")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{name}: probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn feature_index(prefix: &str, name: &str) -> Result<usize> {
    FEATURE_NAMES
        .iter()
        .position(|f| *f == name)
        .ok_or_else(|| Error::UnknownKey(format!("{prefix}{name}")))
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        if self.weeks_min == 0 || self.weeks_min > self.weeks_max {
            return Err(Error::Config("need 1 <= weeks_min <= weeks_max".into()));
        }
        if self.weeks_max * 7 > self.date_span_days {
            return Err(Error::Config(format!(
                "weeks_max = {} does not fit in date_span_days = {}",
                self.weeks_max, self.date_span_days
            )));
        }
        if !(0.0..=1.0).contains(&self.p_female) {
            return Err(Error::Config("p_female must lie in [0,1]".into()));
        }
        if !(self.age_min >= 0.0 && self.age_min <= self.age_max) {
            return Err(Error::Config("need 0 <= age_min <= age_max".into()));
        }
        check_probs("education_probs", &self.education_probs)?;
        if self.education_probs.len() != dataio::EDUCATION_LEVELS.len() {
            return Err(Error::Config(format!(
                "education_probs needs {} entries",
                dataio::EDUCATION_LEVELS.len()
            )));
        }
        check_probs("income_probs", &self.income_probs)?;
        if !(self.base_risk > 0.0 && self.base_risk < 1.0) {
            return Err(Error::Config("base_risk must lie in (0,1)".into()));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return Err(Error::Config("signal must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drift.onset) {
            return Err(Error::Config("drift.onset must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Consumes the cohort keys of a flat configuration; unknown keys are
    /// left for the caller's `finish`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        let mut spec = Self {
            n_patients: kv.take_or("n_patients", d.n_patients)?,
            weeks_min: kv.take_or("weeks_min", d.weeks_min)?,
            weeks_max: kv.take_or("weeks_max", d.weeks_max)?,
            date_span_days: kv.take_or("date_span_days", d.date_span_days)?,
            start_date: match kv.take_str("start_date") {
                Some(s) => dataio::parse_date(&s)
                    .ok_or_else(|| Error::Config(format!("start_date: cannot parse `{s}`")))?,
                None => d.start_date,
            },
            p_female: kv.take_or("p_female", d.p_female)?,
            age_min: kv.take_or("age_min", d.age_min)?,
            age_max: kv.take_or("age_max", d.age_max)?,
            education_probs: kv.take_list("education_probs")?.unwrap_or(d.education_probs),
            income_probs: kv.take_list("income_probs")?.unwrap_or(d.income_probs),
            base_risk: kv.take_or("base_risk", d.base_risk)?,
            signal: kv.take_or("signal", d.signal)?,
            label_coef: d.label_coef,
            drift: DriftSpec {
                onset: kv.take_or("drift.onset", 0.5)?,
                ..DriftSpec::default()
            },
            output: kv.take_or("output", d.output)?,
            seed: kv.take_or("seed", d.seed)?,
        };
        for (name, v) in kv.take_prefixed("label_coef.") {
            spec.label_coef[feature_index("label_coef.", &name)?] = parse_f64(&format!("label_coef.{name}"), &v)?;
        }
        for (name, v) in kv.take_prefixed("drift.covariate_shift.") {
            let i = DRIVERS
                .iter()
                .position(|x| *x == name)
                .ok_or_else(|| Error::UnknownKey(format!("drift.covariate_shift.{name}")))?;
            spec.drift.covariate_shift[i] = parse_f64(&name, &v)?;
        }
        for (name, v) in kv.take_prefixed("drift.concept.") {
            spec.drift.concept_drift[feature_index("drift.concept.", &name)?] = parse_f64(&name, &v)?;
        }
        let sub = kv.take_prefixed("drift.subgroup.");
        if !sub.is_empty() {
            let mut attribute = None;
            let mut group = Group::B;
            let mut threshold = None;
            let mut intercept = 0.0;
            let mut coef = [0.0; 9];
            for (name, v) in sub {
                match name.as_str() {
                    "attribute" => attribute = Some(v.parse::<AttrName>().map_err(Error::Config)?),
                    "group" => group = v.parse::<Group>().map_err(Error::Config)?,
                    "threshold" => threshold = Some(parse_f64(&name, &v)?),
                    "intercept" => intercept = parse_f64(&name, &v)?,
                    other => {
                        let i = FEATURE_NAMES
                            .iter()
                            .position(|f| *f == other)
                            .ok_or_else(|| Error::UnknownKey(format!("drift.subgroup.{other}")))?;
                        coef[i] = parse_f64(other, &v)?;
                    }
                }
            }
            let attribute = attribute
                .ok_or_else(|| Error::Config("drift.subgroup.attribute is required".into()))?;
            spec.drift.subgroup_drift = Some(SubgroupDrift {
                attribute,
                group,
                threshold,
                intercept,
                coef,
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    /// The spec as flat key-value pairs, readable by [`CohortSpec::from_kv`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut out: Vec<(String, String)> = vec![
            ("n_patients".into(), self.n_patients.to_string()),
            ("weeks_min".into(), self.weeks_min.to_string()),
            ("weeks_max".into(), self.weeks_max.to_string()),
            ("date_span_days".into(), self.date_span_days.to_string()),
            ("start_date".into(), self.start_date.to_string()),
            ("p_female".into(), self.p_female.to_string()),
            ("age_min".into(), self.age_min.to_string()),
            ("age_max".into(), self.age_max.to_string()),
            ("education_probs".into(), list(&self.education_probs)),
            ("income_probs".into(), list(&self.income_probs)),
            ("base_risk".into(), self.base_risk.to_string()),
            ("signal".into(), self.signal.to_string()),
            (
                "output".into(),
                match self.output {
                    SynthOutput::Weekly => "weekly".into(),
                    SynthOutput::Cgm => "cgm".into(),
                },
            ),
            ("seed".into(), self.seed.to_string()),
            ("drift.onset".into(), self.drift.onset.to_string()),
        ];
        for (name, c) in FEATURE_NAMES.iter().zip(&self.label_coef) {
            out.push((format!("label_coef.{name}"), c.to_string()));
        }
        for (name, c) in DRIVERS.iter().zip(&self.drift.covariate_shift) {
            out.push((format!("drift.covariate_shift.{name}"), c.to_string()));
        }
        for (name, c) in FEATURE_NAMES.iter().zip(&self.drift.concept_drift) {
            out.push((format!("drift.concept.{name}"), c.to_string()));
        }
        if let Some(s) = &self.drift.subgroup_drift {
            out.push(("drift.subgroup.attribute".into(), s.attribute.to_string()));
            out.push(("drift.subgroup.group".into(), s.group.to_string()));
            if let Some(t) = s.threshold {
                out.push(("drift.subgroup.threshold".into(), t.to_string()));
            }
            out.push(("drift.subgroup.intercept".into(), s.intercept.to_string()));
            for (name, c) in FEATURE_NAMES.iter().zip(&s.coef) {
                out.push((format!("drift.subgroup.{name}"), c.to_string()));
            }
        }
        out
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}` as a number")))
}

/// Ground truth recorded alongside a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub feature_names: Vec<String>,
    /// Applied to `(x - center) / scale`.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
    pub realized_rate: f64,
    pub n_rows: usize,
    pub subgroup_threshold: Option<f64>,
    pub drift: DriftSpec,
    /// AUC a logistic model is expected to reach on a large stationary
    /// cohort against these labels.
    pub recoverability_auc_floor: f64,
}

pub struct Cohort {
    pub table: WeeklyTable,
    pub truth: GroundTruth,
}

struct PatientDraw {
    meta: PatientMeta,
    rows: Vec<(NaiveDate, f64, GlycemicFeatures)>,
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    Normal::new(0.0, sd).expect("finite sd").sample(rng)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    Poisson::new(lambda.clamp(1e-6, 1e6))
        .expect("positive rate")
        .sample(rng) as u32
}

fn draw_meta(spec: &CohortSpec, id: String, rng: &mut ChaCha8Rng) -> PatientMeta {
    let sex = if rng.random::<f64>() < spec.p_female {
        Sex::Female
    } else {
        Sex::Male
    };
    let age = spec.age_min + (spec.age_max - spec.age_min) * rng.random::<f64>();
    PatientMeta {
        patient_id: id,
        sex: Some(sex),
        age: Some((age * 10.0).round() / 10.0),
        education: Some(categorical(rng, &spec.education_probs) as u8),
        income: Some(categorical(rng, &spec.income_probs) as u8),
        race_ethnicity: Some(RACE_LABELS[categorical(rng, &RACE_PROBS)].to_string()),
    }
}

/// Features of one week from its latent drivers.
fn features_from_drivers(h: f64, lo: f64, v: f64, rng: &mut ChaCha8Rng) -> GlycemicFeatures {
    let a_tar = -1.0 + 0.9 * h;
    let a_tbr = -2.8 + 0.8 * lo;
    let m = a_tar.max(a_tbr).max(0.0);
    let (e_tar, e_tbr, e_tir) = ((a_tar - m).exp(), (a_tbr - m).exp(), (-m).exp());
    let total = e_tar + e_tbr + e_tir;
    let tar = e_tar / total;
    let tbr = e_tbr / total;
    let tir = 1.0 - tar - tbr;
    let mean = (150.0 + 35.0 * h - 10.0 * lo).clamp(80.0, 350.0);
    let sd = (50f64.ln() + 0.25 * v + 0.12 * h).exp();
    let mage = sd * (1.6 + normal(rng, 0.15)).max(0.5);
    GlycemicFeatures {
        tir,
        tar,
        tbr,
        sd,
        mage,
        cv: sd / mean,
        hyper_events: poisson(rng, (1.6 + 0.35 * h + 0.15 * v).exp()),
        hypo_events: poisson(rng, (0.4 + 0.5 * lo + 0.1 * v).exp()),
        severe_hyper_events: poisson(rng, (-0.3 + 0.7 * h + 0.2 * v).exp()),
    }
}

fn draw_patient(spec: &CohortSpec, i: usize) -> PatientDraw {
    let mut rng = seed::rng_for(spec.seed, &[stream::COHORT, i as u64]);
    let id = format!("P{:04}", i + 1);
    let meta = draw_meta(spec, id, &mut rng);
    let weeks = rng.random_range(spec.weeks_min..=spec.weeks_max);
    let last_start = spec.date_span_days - weeks * 7;
    let offset = rng.random_range(0..=last_start);
    let z = [normal(&mut rng, 0.8), normal(&mut rng, 0.8), normal(&mut rng, 0.8)];
    let rows = (0..weeks)
        .map(|w| {
            let day = offset + 7 * w;
            let tau = day as f64 / spec.date_span_days as f64;
            let cs = &spec.drift.covariate_shift;
            let h = z[0] + normal(&mut rng, 0.6) + cs[0] * tau;
            let lo = z[1] + normal(&mut rng, 0.6) + cs[1] * tau;
            let v = z[2] + normal(&mut rng, 0.6) + cs[2] * tau;
            let date = spec.start_date + Duration::days(day as i64);
            (date, tau, features_from_drivers(h, lo, v, &mut rng))
        })
        .collect();
    PatientDraw { meta, rows }
}

fn mean_sd(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Solves `mean_i sigmoid(b + eta_i) = target` for `b` by bisection.
fn solve_intercept(eta: &[f64], target: f64) -> f64 {
    let rate = |b: f64| eta.iter().map(|e| sigmoid(b + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generates a weekly cohort with ground-truth logistic labels.
pub fn gen_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let draws: Vec<PatientDraw> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| draw_patient(spec, i))
        .collect();
    let patients: BTreeMap<String, PatientMeta> = draws
        .iter()
        .map(|d| (d.meta.patient_id.clone(), d.meta.clone()))
        .collect();

    let rows: Vec<(usize, NaiveDate, f64, [f64; 9])> = draws
        .iter()
        .enumerate()
        .flat_map(|(p, d)| {
            d.rows
                .iter()
                .map(move |(date, tau, f)| (p, *date, *tau, f.to_array()))
        })
        .collect();
    let mut centers = Vec::with_capacity(9);
    let mut scales = Vec::with_capacity(9);
    for j in 0..9 {
        let (m, s) = mean_sd(rows.iter().map(|r| r.3[j]));
        centers.push(m);
        scales.push(if s > 0.0 { s } else { 1.0 });
    }
    let standardized = |x: &[f64; 9]| -> [f64; 9] {
        std::array::from_fn(|j| (x[j] - centers[j]) / scales[j])
    };

    let raw: Vec<f64> = rows
        .iter()
        .map(|r| dot9(&spec.label_coef, &standardized(&r.3)))
        .collect();
    let (_, raw_sd) = mean_sd(raw.iter().copied());
    let scale = if raw_sd > 0.0 { spec.signal / raw_sd } else { 0.0 };
    let coef: [f64; 9] = std::array::from_fn(|j| spec.label_coef[j] * scale);

    let sub = spec.drift.subgroup_drift.as_ref();
    let sub_attr = sub
        .map(|s| ProtectedAttr::resolve(s.attribute, s.threshold, &patients))
        .transpose()?;
    let in_subgroup: Vec<bool> = draws
        .iter()
        .map(|d| match (sub, &sub_attr) {
            (Some(s), Some(a)) => dataio::binarize(&d.meta, a) == Some(s.group),
            _ => false,
        })
        .collect();

    let eta: Vec<f64> = rows
        .iter()
        .map(|(p, _, tau, x)| {
            let z = standardized(x);
            let ramp = spec.drift.ramp(*tau);
            let mut e = 0.0;
            for j in 0..9 {
                e += (coef[j] + spec.drift.concept_drift[j] * ramp) * z[j];
            }
            if let Some(s) = sub {
                if in_subgroup[*p] && *tau >= spec.drift.onset {
                    e += s.intercept + dot9(&s.coef, &z);
                }
            }
            e
        })
        .collect();
    let intercept = solve_intercept(&eta, spec.base_risk);

    let mut observations = Vec::with_capacity(rows.len());
    let mut positives = 0usize;
    let mut row_idx = 0usize;
    for (p, d) in draws.iter().enumerate() {
        let mut rng = seed::rng_for(spec.seed, &[stream::COHORT, p as u64, 1]);
        for (date, _, f) in &d.rows {
            let prob = sigmoid(intercept + eta[row_idx]);
            let label = u8::from(rng.random::<f64>() < prob);
            positives += usize::from(label);
            observations.push(WeeklyObservation {
                patient_id: d.meta.patient_id.clone(),
                week_start: *date,
                features: *f,
                extras: Vec::new(),
                label,
            });
            row_idx += 1;
        }
    }
    let n_rows = observations.len();
    let table = WeeklyTable::new(observations, patients, Vec::new())?;
    Ok(Cohort {
        table,
        truth: GroundTruth {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            coefficients: coef.to_vec(),
            intercept,
            centers,
            scales,
            realized_rate: positives as f64 / n_rows as f64,
            n_rows,
            subgroup_threshold: sub_attr.and_then(|a| a.threshold),
            drift: spec.drift.clone(),
            recoverability_auc_floor: 0.85,
        },
    })
}

fn dot9(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub patient_id: String,
    pub start: Minute,
    pub days: usize,
    /// Long-run mean, mg/dL.
    pub mean: f64,
    /// Per-step innovation standard deviation, mg/dL.
    pub volatility: f64,
    /// Per-step pull toward the mean, in (0, 1].
    pub reversion: f64,
    /// Expected meals per day.
    pub spike_rate: f64,
    /// Peak excursion above baseline, mg/dL.
    pub spike_height: f64,
    /// Minutes from meal to return to baseline.
    pub spike_duration: f64,
}

impl TraceParams {
    pub fn new(patient_id: impl Into<String>, start: Minute, days: usize, mean: f64) -> Self {
        Self {
            patient_id: patient_id.into(),
            start,
            days,
            mean,
            volatility: 4.0,
            reversion: 0.05,
            spike_rate: 3.0,
            spike_height: 80.0,
            spike_duration: 150.0,
        }
    }
}

pub const TRACE_CADENCE: i64 = 5;
pub const TRACE_MIN: f64 = 40.0;
pub const TRACE_MAX: f64 = 400.0;

/// 5-minute trace: a mean-reverting walk plus triangular post-meal
/// excursions (rise over the first third, decay over the rest), clipped to
/// [40, 400] mg/dL.
pub fn gen_trace(params: &TraceParams, seed_value: u64) -> Vec<GlucoseReading> {
    let mut rng = seed::rng_for(seed_value, &[stream::TRACE]);
    let n = params.days * 1440 / TRACE_CADENCE as usize;
    let p_meal = params.spike_rate * TRACE_CADENCE as f64 / 1440.0;
    let mut meals: Vec<usize> = Vec::new();
    let mut base = params.mean;
    let rise = params.spike_duration / 3.0;
    let mut out = Vec::with_capacity(n);
    for step in 0..n {
        if params.volatility > 0.0 {
            base += params.reversion * (params.mean - base) + normal(&mut rng, params.volatility);
        }
        if p_meal > 0.0 && rng.random::<f64>() < p_meal {
            meals.push(step);
        }
        let t = (step as i64 * TRACE_CADENCE) as f64;
        let mut bump = 0.0;
        meals.retain(|&m| {
            let age = t - (m as i64 * TRACE_CADENCE) as f64;
            if age >= params.spike_duration {
                return false;
            }
            bump += if age < rise {
                params.spike_height * age / rise
            } else {
                params.spike_height * (params.spike_duration - age) / (params.spike_duration - rise)
            };
            true
        });
        out.push(GlucoseReading {
            patient_id: params.patient_id.clone(),
            timestamp: Minute(params.start.0 + step as i64 * TRACE_CADENCE),
            glucose: (base + bump).clamp(TRACE_MIN, TRACE_MAX),
        });
    }
    out
}

/// Raw CGM cohort: metadata plus one trace per patient, trace parameters
/// derived from the same latent drivers as [`gen_cohort`].
pub fn gen_cgm_cohort(spec: &CohortSpec) -> Result<(CgmStreams, BTreeMap<String, PatientMeta>)> {
    spec.validate()?;
    let per_patient: Vec<(PatientMeta, Vec<GlucoseReading>)> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng_for(spec.seed, &[stream::COHORT, i as u64]);
            let meta = draw_meta(spec, format!("P{:04}", i + 1), &mut rng);
            let weeks = rng.random_range(spec.weeks_min..=spec.weeks_max);
            let offset = rng.random_range(0..=spec.date_span_days - weeks * 7);
            let h = normal(&mut rng, 0.8);
            let v = normal(&mut rng, 0.8);
            let start = Minute::start_of(spec.start_date + Duration::days(offset as i64));
            let mut params = TraceParams::new(meta.patient_id.clone(), start, weeks * 7, 160.0 + 40.0 * h);
            params.volatility = (4.0 * (0.3 * v).exp()).max(0.5);
            params.spike_height = (90.0 + 30.0 * h).max(20.0);
            params.spike_duration = 180.0 + 40.0 * v.max(-2.0);
            let trace = gen_trace(&params, seed::derive_seed(spec.seed, &[stream::COHORT, i as u64, 2]));
            (meta, trace)
        })
        .collect();
    let mut streams = CgmStreams::new();
    let mut metas = BTreeMap::new();
    for (m, t) in per_patient {
        streams.insert(m.patient_id.clone(), t);
        metas.insert(m.patient_id.clone(), m);
    }
    Ok((streams, metas))
}

/// Mean severe-event count per complete week of a trace, via [`cgmfeat`].
pub fn severe_events_per_week(trace: &[GlucoseReading]) -> f64 {
    let weeks = cgmfeat::featurize_patient(trace, &Thresholds::default());
    if weeks.is_empty() {
        return 0.0;
    }
    weeks
        .iter()
        .map(|w| f64::from(w.features.severe_hyper_events))
        .sum::<f64>()
        / weeks.len() as f64
}
