//! Cohort schema, CSV ingestion and validation, protected-attribute
//! binarization, chronological batching and holdout sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

/// Plausible CGM reporting range, mg/dL. Readings outside are dropped.
pub const GLUCOSE_MIN: f64 = 20.0;
pub const GLUCOSE_MAX: f64 = 600.0;

/// Tolerance on `tir + tar + tbr = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Names of the nine glycemic features, in design-matrix order.
pub const FEATURE_NAMES: [&str; 9] = [
    "tir",
    "tar",
    "tbr",
    "sd",
    "mage",
    "cv",
    "hyper_events",
    "hypo_events",
    "severe_hyper_events",
];

/// Minutes since the Unix epoch, UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Minute(pub i64);

impl Minute {
    pub fn from_datetime(dt: NaiveDateTime) -> Self {
        Minute(dt.and_utc().timestamp().div_euclid(60))
    }

    pub fn to_datetime(self) -> NaiveDateTime {
        DateTime::from_timestamp(self.0 * 60, 0)
            .expect("minute timestamp within chrono range")
            .naive_utc()
    }

    pub fn date(self) -> NaiveDate {
        self.to_datetime().date()
    }

    pub fn start_of(date: NaiveDate) -> Self {
        Self::from_datetime(date.and_hms_opt(0, 0, 0).expect("midnight"))
    }
}

impl fmt::Display for Minute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:00Z"))
    }
}

/// Parses an ISO-8601 datetime (with or without offset) into a UTC minute.
pub fn parse_timestamp(s: &str) -> Option<Minute> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(Minute::from_datetime(dt.naive_utc()));
    }
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(Minute::from_datetime)
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseReading {
    pub patient_id: String,
    pub timestamp: Minute,
    /// mg/dL
    pub glucose: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Sex::Male),
            "female" | "f" => Ok(Sex::Female),
            other => Err(format!("unknown sex `{other}`")),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

/// Caregiver education levels, ordinal. Encoded as integers 0..=4 in CSVs;
/// the names below are also accepted on input.
pub const EDUCATION_LEVELS: [&str; 5] = [
    "less_than_high_school",
    "high_school",
    "some_college",
    "bachelors",
    "graduate",
];

/// Default education cut: bachelor's degree or higher is group A.
pub const DEFAULT_EDUCATION_THRESHOLD: f64 = 3.0;

fn parse_ordinal(s: &str, names: &[&str]) -> std::result::Result<u8, String> {
    let t = s.trim();
    if let Ok(v) = t.parse::<u8>() {
        return Ok(v);
    }
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(t))
        .map(|p| p as u8)
        .ok_or_else(|| format!("unknown ordinal category `{t}`"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub patient_id: String,
    pub sex: Option<Sex>,
    /// Years.
    pub age: Option<f64>,
    /// Ordinal level, see [`EDUCATION_LEVELS`].
    pub education: Option<u8>,
    /// Ordinal income bracket, higher is richer.
    pub income: Option<u8>,
    /// Carried through, not audited by default.
    pub race_ethnicity: Option<String>,
}

impl PatientMeta {
    pub fn unknown(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            sex: None,
            age: None,
            education: None,
            income: None,
            race_ethnicity: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrName {
    Sex,
    Age,
    Education,
    Income,
}

impl AttrName {
    pub const ALL: [AttrName; 4] = [
        AttrName::Sex,
        AttrName::Age,
        AttrName::Education,
        AttrName::Income,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttrName::Sex => "sex",
            AttrName::Age => "age",
            AttrName::Education => "education",
            AttrName::Income => "income",
        }
    }

    fn value(self, meta: &PatientMeta) -> Option<f64> {
        match self {
            AttrName::Sex => meta.sex.map(|s| match s {
                Sex::Male => 0.0,
                Sex::Female => 1.0,
            }),
            AttrName::Age => meta.age,
            AttrName::Education => meta.education.map(f64::from),
            AttrName::Income => meta.income.map(f64::from),
        }
    }
}

impl FromStr for AttrName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AttrName::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| format!("unknown protected attribute `{s}`"))
    }
}

impl fmt::Display for AttrName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" => Ok(Group::A),
            "B" => Ok(Group::B),
            _ => Err(format!("unknown group `{s}`")),
        }
    }
}

/// A protected attribute together with its binarization rule.
///
/// Sex maps male to A and female to B. Ordinal and continuous attributes map
/// to A iff `value >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtectedAttr {
    pub name: AttrName,
    pub threshold: Option<f64>,
}

impl ProtectedAttr {
    pub fn sex() -> Self {
        Self {
            name: AttrName::Sex,
            threshold: None,
        }
    }

    /// Fixes the cut value: the override if given, otherwise the cohort
    /// median (age, income) or the bachelor's-degree level (education).
    pub fn resolve(
        name: AttrName,
        threshold_override: Option<f64>,
        patients: &BTreeMap<String, PatientMeta>,
    ) -> Result<Self> {
        let threshold = match name {
            AttrName::Sex => None,
            _ if threshold_override.is_some() => threshold_override,
            AttrName::Education => Some(DEFAULT_EDUCATION_THRESHOLD),
            AttrName::Age | AttrName::Income => {
                let values: Vec<f64> = patients.values().filter_map(|m| name.value(m)).collect();
                Some(median(&values).ok_or_else(|| {
                    Error::Config(format!("cannot derive {name} threshold: no values"))
                })?)
            }
        };
        Ok(Self { name, threshold })
    }
}

/// Median with the even-length midpoint convention.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Group label of one patient; `None` when the attribute value is missing,
/// which excludes the patient from that attribute's disparity analysis.
pub fn binarize(meta: &PatientMeta, attr: &ProtectedAttr) -> Option<Group> {
    let value = attr.name.value(meta)?;
    match attr.name {
        AttrName::Sex => Some(if value == 0.0 { Group::A } else { Group::B }),
        _ => {
            let t = attr.threshold?;
            Some(if value >= t { Group::A } else { Group::B })
        }
    }
}

/// The weekly glycemic feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlycemicFeatures {
    pub tir: f64,
    pub tar: f64,
    pub tbr: f64,
    pub sd: f64,
    pub mage: f64,
    pub cv: f64,
    pub hyper_events: u32,
    pub hypo_events: u32,
    pub severe_hyper_events: u32,
}

impl GlycemicFeatures {
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.tir,
            self.tar,
            self.tbr,
            self.sd,
            self.mage,
            self.cv,
            f64::from(self.hyper_events),
            f64::from(self.hypo_events),
            f64::from(self.severe_hyper_events),
        ]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let sum = self.tir + self.tar + self.tbr;
        for (name, v) in [("tir", self.tir), ("tar", self.tar), ("tbr", self.tbr)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name}={v} outside [0,1]"));
            }
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(format!("simplex violation: tir+tar+tbr={sum}"));
        }
        for (name, v) in [("sd", self.sd), ("mage", self.mage), ("cv", self.cv)] {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("{name}={v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyObservation {
    pub patient_id: String,
    pub week_start: NaiveDate,
    pub features: GlycemicFeatures,
    /// Optional additional numeric features, named by the table.
    pub extras: Vec<f64>,
    /// 1 = high-risk week.
    pub label: u8,
}

/// Validated weekly rows plus the metadata of every referenced patient.
///
/// Rows are kept sorted by `(patient_id, week_start)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeeklyTable {
    pub observations: Vec<WeeklyObservation>,
    pub patients: BTreeMap<String, PatientMeta>,
    pub extra_names: Vec<String>,
}

impl WeeklyTable {
    pub fn new(
        mut observations: Vec<WeeklyObservation>,
        patients: BTreeMap<String, PatientMeta>,
        extra_names: Vec<String>,
    ) -> Result<Self> {
        observations.sort_by(|a, b| {
            (a.patient_id.as_str(), a.week_start).cmp(&(b.patient_id.as_str(), b.week_start))
        });
        for w in observations.windows(2) {
            if w[0].patient_id == w[1].patient_id && w[0].week_start == w[1].week_start {
                return Err(Error::Invariant(format!(
                    "duplicate key ({}, {})",
                    w[0].patient_id, w[0].week_start
                )));
            }
        }
        for o in &observations {
            if !patients.contains_key(&o.patient_id) {
                return Err(Error::Invariant(format!(
                    "patient {} has rows but no metadata",
                    o.patient_id
                )));
            }
            if o.extras.len() != extra_names.len() {
                return Err(Error::Invariant("extra feature width mismatch".into()));
            }
        }
        Ok(Self {
            observations,
            patients,
            extra_names,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        FEATURE_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(self.extra_names.iter().cloned())
            .collect()
    }

    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        let o = &self.observations[i];
        let mut row = o.features.to_array().to_vec();
        row.extend_from_slice(&o.extras);
        row
    }

    /// Patients that have at least one row.
    pub fn patient_ids(&self) -> BTreeSet<String> {
        self.observations
            .iter()
            .map(|o| o.patient_id.clone())
            .collect()
    }

    pub fn first_week(&self) -> BTreeMap<&str, NaiveDate> {
        let mut first: BTreeMap<&str, NaiveDate> = BTreeMap::new();
        for o in &self.observations {
            first
                .entry(o.patient_id.as_str())
                .and_modify(|d| *d = (*d).min(o.week_start))
                .or_insert(o.week_start);
        }
        first
    }

    pub fn group_of(&self, i: usize, attr: &ProtectedAttr) -> Option<Group> {
        self.patients
            .get(&self.observations[i].patient_id)
            .and_then(|m| binarize(m, attr))
    }

    /// Rows whose patient satisfies the predicate, as a new table.
    pub fn filter_patients(&self, keep: impl Fn(&str) -> bool) -> WeeklyTable {
        let observations: Vec<_> = self
            .observations
            .iter()
            .filter(|o| keep(&o.patient_id))
            .cloned()
            .collect();
        let patients = self
            .patients
            .iter()
            .filter(|(id, _)| keep(id))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        WeeklyTable {
            observations,
            patients,
            extra_names: self.extra_names.clone(),
        }
    }
}

/// Canonical column name to header name in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub columns: BTreeMap<String, String>,
    /// Header names of extra numeric feature columns, in order.
    pub extras: Vec<String>,
}

/// Canonical weekly CSV columns.
pub const WEEKLY_COLUMNS: [&str; 16] = [
    "patient_id",
    "week_start",
    "tir",
    "tar",
    "tbr",
    "sd",
    "mage",
    "cv",
    "hyper_events",
    "hypo_events",
    "severe_hyper_events",
    "label",
    "sex",
    "age",
    "education",
    "income",
];

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            columns: WEEKLY_COLUMNS
                .iter()
                .map(|c| (c.to_string(), c.to_string()))
                .collect(),
            extras: Vec::new(),
        }
    }
}

impl ColumnMapping {
    /// Overrides the header name of one canonical column.
    pub fn set(&mut self, canonical: &str, header: &str) -> Result<()> {
        if canonical == "race_ethnicity" || WEEKLY_COLUMNS.contains(&canonical) {
            self.columns
                .insert(canonical.to_string(), header.to_string());
            Ok(())
        } else {
            Err(Error::UnknownKey(format!("column.{canonical}")))
        }
    }

    fn header<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.columns
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    /// 1-based line number in the file (header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub rejects: Vec<Rejection>,
}

impl LoadReport {
    fn reject(&mut self, line: u64, reason: impl Into<String>) {
        let reason = reason.into();
        warn!("line {line}: rejected: {reason}");
        self.rejects.push(Rejection { line, reason });
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn opt_field<'a>(rec: &'a csv::StringRecord, idx: Option<usize>) -> Option<&'a str> {
    idx.and_then(|i| rec.get(i))
        .map(str::trim)
        .filter(|s| !s.is_empty() && !s.eq_ignore_ascii_case("na"))
}

fn parse_count(s: &str, name: &str) -> std::result::Result<u32, String> {
    let v: f64 = s
        .parse()
        .map_err(|_| format!("{name}: unparseable `{s}`"))?;
    if !(v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX)) {
        return Err(format!("{name}: `{s}` is not a non-negative integer"));
    }
    Ok(v as u32)
}

fn parse_real(s: &str, name: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|_| format!("{name}: unparseable `{s}`"))?;
    if !v.is_finite() {
        return Err(format!("{name}: non-finite value"));
    }
    Ok(v)
}

fn parse_meta_fields(
    id: &str,
    sex: Option<&str>,
    age: Option<&str>,
    education: Option<&str>,
    income: Option<&str>,
    race: Option<&str>,
) -> std::result::Result<PatientMeta, String> {
    let age = age.map(|s| parse_real(s, "age")).transpose()?;
    if let Some(a) = age {
        if a < 0.0 {
            return Err(format!("age: negative value {a}"));
        }
    }
    Ok(PatientMeta {
        patient_id: id.to_string(),
        sex: sex.map(str::parse).transpose()?,
        age,
        education: education
            .map(|s| parse_ordinal(s, &EDUCATION_LEVELS))
            .transpose()?,
        income: income.map(|s| parse_ordinal(s, &[])).transpose()?,
        race_ethnicity: race.map(str::to_string),
    })
}

/// Loads and validates a weekly feature table. Patient metadata is read from
/// the sex/age/education/income columns when present and must be consistent
/// across a patient's rows.
pub fn load_weekly_csv(path: &Path, mapping: &ColumnMapping) -> Result<(WeeklyTable, LoadReport)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    let required = [
        "patient_id",
        "week_start",
        "tir",
        "tar",
        "tbr",
        "sd",
        "mage",
        "cv",
        "hyper_events",
        "hypo_events",
        "severe_hyper_events",
        "label",
    ];
    let mut idx = BTreeMap::new();
    for c in required {
        let h = mapping.header(c);
        let i = header_index(&headers, h)
            .ok_or_else(|| Error::Schema(format!("missing column `{h}` (for {c})")))?;
        idx.insert(c, i);
    }
    let meta_idx = |c: &str| header_index(&headers, mapping.header(c));
    let (sex_i, age_i, edu_i, inc_i, race_i) = (
        meta_idx("sex"),
        meta_idx("age"),
        meta_idx("education"),
        meta_idx("income"),
        meta_idx("race_ethnicity"),
    );
    let mut extra_idx = Vec::new();
    for e in &mapping.extras {
        extra_idx.push(
            header_index(&headers, e)
                .ok_or_else(|| Error::Schema(format!("missing extra column `{e}`")))?,
        );
    }

    let mut report = LoadReport::default();
    let mut observations = Vec::new();
    let mut patients: BTreeMap<String, PatientMeta> = BTreeMap::new();
    let mut seen: BTreeSet<(String, NaiveDate)> = BTreeSet::new();

    for (n, rec) in rdr.records().enumerate() {
        let line = n as u64 + 2;
        report.rows_read += 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.reject(line, format!("malformed record: {e}"));
                continue;
            }
        };
        let get = |c: &str| rec.get(idx[c]).map(str::trim).unwrap_or("");
        let parsed = (|| -> std::result::Result<(WeeklyObservation, PatientMeta), String> {
            let patient_id = get("patient_id");
            if patient_id.is_empty() {
                return Err("empty patient_id".into());
            }
            let week_start = parse_date(get("week_start"))
                .ok_or_else(|| format!("week_start: unparseable `{}`", get("week_start")))?;
            let features = GlycemicFeatures {
                tir: parse_real(get("tir"), "tir")?,
                tar: parse_real(get("tar"), "tar")?,
                tbr: parse_real(get("tbr"), "tbr")?,
                sd: parse_real(get("sd"), "sd")?,
                mage: parse_real(get("mage"), "mage")?,
                cv: parse_real(get("cv"), "cv")?,
                hyper_events: parse_count(get("hyper_events"), "hyper_events")?,
                hypo_events: parse_count(get("hypo_events"), "hypo_events")?,
                severe_hyper_events: parse_count(
                    get("severe_hyper_events"),
                    "severe_hyper_events",
                )?,
            };
            features.validate()?;
            let label = match get("label") {
                "0" => 0,
                "1" => 1,
                other => return Err(format!("label: `{other}` is not 0/1")),
            };
            let extras = extra_idx
                .iter()
                .zip(&mapping.extras)
                .map(|(&i, name)| parse_real(rec.get(i).unwrap_or("").trim(), name))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let meta = parse_meta_fields(
                patient_id,
                opt_field(&rec, sex_i),
                opt_field(&rec, age_i),
                opt_field(&rec, edu_i),
                opt_field(&rec, inc_i),
                opt_field(&rec, race_i),
            )?;
            Ok((
                WeeklyObservation {
                    patient_id: patient_id.to_string(),
                    week_start,
                    features,
                    extras,
                    label,
                },
                meta,
            ))
        })();
        let (obs, meta) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                report.reject(line, reason);
                continue;
            }
        };
        if !seen.insert((obs.patient_id.clone(), obs.week_start)) {
            report.reject(line, "duplicate key");
            continue;
        }
        match patients.get(&obs.patient_id) {
            Some(existing) if *existing != meta => {
                seen.remove(&(obs.patient_id.clone(), obs.week_start));
                report.reject(line, "inconsistent patient metadata");
                continue;
            }
            Some(_) => {}
            None => {
                patients.insert(obs.patient_id.clone(), meta);
            }
        }
        observations.push(obs);
        report.accepted += 1;
    }
    info!(
        "{}: {} rows read, {} accepted, {} rejected",
        path.display(),
        report.rows_read,
        report.accepted,
        report.rejects.len()
    );
    let table = WeeklyTable::new(observations, patients, mapping.extras.clone())?;
    Ok((table, report))
}

/// Reads a patient metadata CSV (`patient_id, sex, age, education, income,
/// race_ethnicity`; only `patient_id` is required).
pub fn load_meta_csv(path: &Path) -> Result<BTreeMap<String, PatientMeta>> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    let id_i = header_index(&headers, "patient_id")
        .ok_or_else(|| Error::Schema("meta csv: missing column `patient_id`".into()))?;
    let col = |c: &str| header_index(&headers, c);
    let (sex_i, age_i, edu_i, inc_i, race_i) = (
        col("sex"),
        col("age"),
        col("education"),
        col("income"),
        col("race_ethnicity"),
    );
    let mut out = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(id_i).unwrap_or("").trim().to_string();
        let meta = parse_meta_fields(
            &id,
            opt_field(&rec, sex_i),
            opt_field(&rec, age_i),
            opt_field(&rec, edu_i),
            opt_field(&rec, inc_i),
            opt_field(&rec, race_i),
        )
        .map_err(|e| Error::Schema(format!("meta csv line {}: {e}", n + 2)))?;
        if out.insert(id.clone(), meta).is_some() {
            return Err(Error::Schema(format!(
                "meta csv: patient `{id}` listed more than once"
            )));
        }
    }
    Ok(out)
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_weekly_csv(path: &Path, table: &WeeklyTable) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = WEEKLY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("race_ethnicity".into());
    header.extend(table.extra_names.iter().cloned());
    wtr.write_record(&header)?;
    for o in &table.observations {
        let meta = &table.patients[&o.patient_id];
        let f = &o.features;
        let mut rec = vec![
            o.patient_id.clone(),
            o.week_start.to_string(),
            f.tir.to_string(),
            f.tar.to_string(),
            f.tbr.to_string(),
            f.sd.to_string(),
            f.mage.to_string(),
            f.cv.to_string(),
            f.hyper_events.to_string(),
            f.hypo_events.to_string(),
            f.severe_hyper_events.to_string(),
            o.label.to_string(),
            fmt_opt(&meta.sex),
            fmt_opt(&meta.age),
            fmt_opt(&meta.education),
            fmt_opt(&meta.income),
            fmt_opt(&meta.race_ethnicity),
        ];
        rec.extend(o.extras.iter().map(f64::to_string));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_meta_csv(path: &Path, patients: &BTreeMap<String, PatientMeta>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "patient_id",
        "sex",
        "age",
        "education",
        "income",
        "race_ethnicity",
    ])?;
    for m in patients.values() {
        wtr.write_record([
            m.patient_id.clone(),
            fmt_opt(&m.sex),
            fmt_opt(&m.age),
            fmt_opt(&m.education),
            fmt_opt(&m.income),
            fmt_opt(&m.race_ethnicity),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CgmLoadReport {
    pub rows_read: usize,
    pub retained: usize,
    pub out_of_range: usize,
    pub duplicates: usize,
    pub rejects: Vec<Rejection>,
}

/// Per-patient glucose streams, sorted by timestamp.
pub type CgmStreams = BTreeMap<String, Vec<GlucoseReading>>;

/// Loads a raw CGM CSV (`patient_id, timestamp, glucose_mgdl`; a `glucose`
/// header is also accepted). Out-of-range readings are dropped and counted;
/// a repeated `(patient, timestamp)` keeps the first row in file order.
pub fn load_cgm_csv(path: &Path) -> Result<(CgmStreams, CgmLoadReport)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr.headers()?.clone();
    let id_i = header_index(&headers, "patient_id")
        .ok_or_else(|| Error::Schema("missing column `patient_id`".into()))?;
    let ts_i = header_index(&headers, "timestamp")
        .ok_or_else(|| Error::Schema("missing column `timestamp`".into()))?;
    let g_i = header_index(&headers, "glucose_mgdl")
        .or_else(|| header_index(&headers, "glucose"))
        .ok_or_else(|| Error::Schema("missing column `glucose_mgdl`".into()))?;

    let mut report = CgmLoadReport::default();
    let mut rows: BTreeMap<String, Vec<(Minute, u64, f64)>> = BTreeMap::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n as u64 + 2;
        report.rows_read += 1;
        let rec = rec?;
        let id = rec.get(id_i).unwrap_or("").trim();
        let Some(ts) = parse_timestamp(rec.get(ts_i).unwrap_or("")) else {
            let reason = format!("timestamp: unparseable `{}`", rec.get(ts_i).unwrap_or(""));
            warn!("line {line}: rejected: {reason}");
            report.rejects.push(Rejection { line, reason });
            continue;
        };
        let g = match rec.get(g_i).unwrap_or("").trim().parse::<f64>() {
            Ok(g) if g.is_finite() => g,
            _ => {
                let reason = "glucose: unparseable".to_string();
                warn!("line {line}: rejected: {reason}");
                report.rejects.push(Rejection { line, reason });
                continue;
            }
        };
        if id.is_empty() {
            report.rejects.push(Rejection {
                line,
                reason: "empty patient_id".into(),
            });
            continue;
        }
        if !(GLUCOSE_MIN..=GLUCOSE_MAX).contains(&g) {
            report.out_of_range += 1;
            continue;
        }
        rows.entry(id.to_string()).or_default().push((ts, line, g));
    }

    let mut streams = BTreeMap::new();
    for (id, mut v) in rows {
        // stable: equal timestamps stay in file order
        v.sort_by_key(|&(ts, _, _)| ts);
        let mut out: Vec<GlucoseReading> = Vec::with_capacity(v.len());
        for (ts, line, g) in v {
            if out.last().is_some_and(|r| r.timestamp == ts) {
                report.duplicates += 1;
                let reason = format!("duplicate timestamp {ts} for patient {id}");
                warn!("line {line}: rejected: {reason}");
                report.rejects.push(Rejection { line, reason });
                continue;
            }
            out.push(GlucoseReading {
                patient_id: id.clone(),
                timestamp: ts,
                glucose: g,
            });
        }
        report.retained += out.len();
        streams.insert(id, out);
    }
    if report.out_of_range > 0 {
        info!(
            "{}: dropped {} out-of-range readings",
            path.display(),
            report.out_of_range
        );
    }
    Ok((streams, report))
}

pub fn write_cgm_csv(path: &Path, streams: &CgmStreams) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["patient_id", "timestamp", "glucose_mgdl"])?;
    for r in streams.values().flatten() {
        wtr.write_record([
            r.patient_id.clone(),
            r.timestamp.to_string(),
            r.glucose.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Half-open calendar window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub n_batches: usize,
    pub assignment: BTreeMap<String, usize>,
    pub holdout: BTreeSet<String>,
    pub boundaries: Vec<DateWindow>,
}

impl BatchPlan {
    pub fn batch_patients(&self, k: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &b)| b == k)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    /// Row indices of `table` whose patient is assigned to batch `k`.
    pub fn batch_rows(&self, table: &WeeklyTable, k: usize) -> Vec<usize> {
        table
            .observations
            .iter()
            .enumerate()
            .filter(|(_, o)| self.assignment.get(&o.patient_id) == Some(&k))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn holdout_rows(&self, table: &WeeklyTable) -> Vec<usize> {
        table
            .observations
            .iter()
            .enumerate()
            .filter(|(_, o)| self.holdout.contains(&o.patient_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn empty_batches(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.assignment.values().copied().collect();
        (0..self.n_batches).filter(|k| !used.contains(k)).collect()
    }
}

/// Splits the cohort date range `[min, max]` (inclusive, in days) into
/// `n_batches` equal spans and assigns each patient to the span holding
/// their first `week_start`.
///
/// With `L = max - min + 1` days, a patient whose first week starts `d`
/// days after `min` goes to batch `floor(d * n / L)`.
pub fn make_batches(table: &WeeklyTable, n_batches: usize) -> Result<BatchPlan> {
    if n_batches < 2 {
        return Err(Error::Config(format!(
            "n_batches must be at least 2, got {n_batches}"
        )));
    }
    let first = table.first_week();
    let (Some(&min), Some(&max)) = (first.values().min(), first.values().max()) else {
        return Err(Error::Config("cannot batch an empty table".into()));
    };
    let len = (max - min).num_days() + 1;
    let n = n_batches as i64;
    let assignment: BTreeMap<String, usize> = first
        .iter()
        .map(|(p, d)| {
            let offset = (*d - min).num_days();
            (p.to_string(), ((offset * n) / len).min(n - 1) as usize)
        })
        .collect();
    // batch k holds offsets d with ceil(k L / n) <= d < ceil((k+1) L / n)
    let ceil_div = |a: i64, b: i64| (a + b - 1) / b;
    let boundaries = (0..n)
        .map(|k| DateWindow {
            start: min + chrono::Duration::days(ceil_div(k * len, n)),
            end: min + chrono::Duration::days(ceil_div((k + 1) * len, n)),
        })
        .collect();
    let plan = BatchPlan {
        n_batches,
        assignment,
        holdout: BTreeSet::new(),
        boundaries,
    };
    for k in plan.empty_batches() {
        warn!("batch {k} has no patients; phases using it will be skipped");
    }
    Ok(plan)
}

/// Stratified patient-level holdout.
///
/// Strata are (patient label-prevalence quartile x protected group). The
/// holdout size is `round(fraction * n_patients)`, apportioned across strata
/// by largest remainder; within a stratum patients are drawn uniformly
/// without replacement.
pub fn make_holdout(
    table: &WeeklyTable,
    fraction: f64,
    seed_value: u64,
    strata_attr: Option<&ProtectedAttr>,
) -> Result<(BTreeSet<String>, WeeklyTable)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0,1), got {fraction}"
        )));
    }
    let mut prevalence: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for o in &table.observations {
        let e = prevalence.entry(o.patient_id.as_str()).or_default();
        e.0 += u32::from(o.label);
        e.1 += 1;
    }
    let n = prevalence.len();
    let mut ranked: Vec<(&str, f64)> = prevalence
        .iter()
        .map(|(p, (pos, tot))| (*p, f64::from(*pos) / f64::from(*tot)))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));

    let mut strata: BTreeMap<(usize, Option<Group>), Vec<&str>> = BTreeMap::new();
    for (rank, (p, _)) in ranked.iter().enumerate() {
        let quartile = rank * 4 / n.max(1);
        let group = strata_attr.and_then(|a| binarize(&table.patients[*p], a));
        strata.entry((quartile, group)).or_default().push(p);
    }

    let total = (fraction * n as f64).round() as usize;
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|members| {
            let exact = fraction * members.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &s in order.iter().take(total.saturating_sub(assigned)) {
        quotas[s].0 += 1;
    }

    let mut holdout = BTreeSet::new();
    for (s, ((key, members), (quota, _))) in strata.iter().zip(&quotas).enumerate() {
        if (members.len() as f64) < 1.0 / fraction {
            info!(
                "holdout stratum {key:?} has {} patients (< 1/fraction); drawing {quota}",
                members.len()
            );
        }
        let mut pool = members.clone();
        let mut rng = seed::rng_for(seed_value, &[seed::stream::HOLDOUT, s as u64]);
        pool.shuffle(&mut rng);
        holdout.extend(pool.into_iter().take(*quota).map(str::to_string));
    }
    let remainder = table.filter_patients(|p| !holdout.contains(p));
    Ok((holdout, remainder))
}
