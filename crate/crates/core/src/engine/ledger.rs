//! The prediction ledger and its on-disk form.
//!
//! One row per (schema, seed, strategy, phase, instance) holding the main
//! model's score, the abstention decision and distance, and the binary
//! predictions of every bootstrap replica and Rashomon member as bit
//! strings. The main model's binary prediction is `score >= threshold` and
//! is withheld for abstained rows.
//!
//! Files written by [`PredictionLedger::write_dir`]:
//!
//! * `ledger.csv`: the rows above.
//! * `instances.csv`: instance index to patient, week, label and groups.
//! * `phases.csv`: per-phase training sizes, tau, Rashomon sizes, notices.
//! * `ledger.json`: threshold, phase count and protected attributes.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{Schema, Strategy};
use crate::dataio::{Group, ProtectedAttr};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseKey {
    pub schema: Schema,
    pub seed: usize,
    pub strategy: Strategy,
    pub phase: usize,
}

impl PhaseKey {
    /// The arm this phase belongs to: the key with phase zeroed.
    pub fn arm(self) -> (Schema, usize, Strategy) {
        (self.schema, self.seed, self.strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub key: PhaseKey,
    pub instance: usize,
    pub score: f64,
    pub abstained: bool,
    pub distance: Option<f64>,
    pub bootstrap: Vec<u8>,
    pub rashomon: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeta {
    pub key: PhaseKey,
    pub train_rows: usize,
    pub train_positives: usize,
    pub train_patients: usize,
    pub eval_rows: usize,
    pub tau: Option<f64>,
    pub rashomon_candidates: usize,
    pub rashomon_members: usize,
    pub rashomon_best_auc: Option<f64>,
    /// Bootstrap replicas replaced by a constant-score model.
    pub fallback_models: usize,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub patient_id: String,
    pub week_start: NaiveDate,
    pub label: u8,
    /// Aligned with [`PredictionLedger::attributes`].
    pub groups: Vec<Option<Group>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerHeader {
    pub decision_threshold: f64,
    pub n_phases: usize,
    pub attributes: Vec<ProtectedAttr>,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLedger {
    pub header: LedgerHeader,
    pub instances: Vec<InstanceInfo>,
    /// Sorted by key.
    pub phases: Vec<PhaseMeta>,
    /// Sorted by (key, instance).
    pub rows: Vec<LedgerRow>,
}

impl PredictionLedger {
    /// Main-model prediction, `None` when abstained.
    pub fn pred(&self, row: &LedgerRow) -> Option<u8> {
        (!row.abstained).then(|| self.baseline_pred(row))
    }

    /// Main-model prediction ignoring abstention.
    pub fn baseline_pred(&self, row: &LedgerRow) -> u8 {
        u8::from(row.score >= self.header.decision_threshold)
    }

    pub fn rows_for(&self, key: PhaseKey) -> &[LedgerRow] {
        let lo = self.rows.partition_point(|r| r.key < key);
        let hi = self.rows.partition_point(|r| r.key <= key);
        &self.rows[lo..hi]
    }

    pub fn phase_meta(&self, key: PhaseKey) -> Option<&PhaseMeta> {
        self.phases
            .binary_search_by(|p| p.key.cmp(&key))
            .ok()
            .map(|i| &self.phases[i])
    }

    /// Distinct `(schema, seed, strategy)` arms, sorted.
    pub fn arms(&self) -> Vec<(Schema, usize, Strategy)> {
        let mut arms: Vec<_> = self.phases.iter().map(|p| p.key.arm()).collect();
        arms.dedup();
        arms
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !self.rows.windows(2).all(|w| (w[0].key, w[0].instance) < (w[1].key, w[1].instance)) {
            return Err(Error::Invariant("ledger rows not strictly sorted".into()));
        }
        if !self.phases.windows(2).all(|w| w[0].key < w[1].key) {
            return Err(Error::Invariant("phase records not strictly sorted".into()));
        }
        for p in &self.phases {
            let n = self.rows_for(p.key).len();
            if n != p.eval_rows {
                return Err(Error::Invariant(format!(
                    "{:?}: {} ledger rows, {} evaluated",
                    p.key, n, p.eval_rows
                )));
            }
        }
        for r in &self.rows {
            if r.instance >= self.instances.len() {
                return Err(Error::Invariant(format!("unknown instance {}", r.instance)));
            }
            if r.bootstrap.len() != self.header.bootstrap {
                return Err(Error::Invariant("bootstrap width mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = serde_json::to_string_pretty(&self.header)? + "\n";
        let p = dir.join("ledger.json");
        fs::write(&p, header).map_err(|e| Error::io(&p, e))?;

        let mut w = csv::Writer::from_path(dir.join("instances.csv"))?;
        let mut head = vec!["instance".to_string(), "patient_id".into(), "week_start".into(), "label".into()];
        head.extend(self.header.attributes.iter().map(|a| format!("group_{}", a.name)));
        w.write_record(&head)?;
        for (i, inst) in self.instances.iter().enumerate() {
            let mut rec = vec![
                i.to_string(),
                inst.patient_id.clone(),
                inst.week_start.to_string(),
                inst.label.to_string(),
            ];
            rec.extend(inst.groups.iter().map(|g| g.map_or(String::new(), |g| g.to_string())));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("phases.csv"))?;
        w.write_record([
            "schema",
            "seed",
            "strategy",
            "phase",
            "train_rows",
            "train_positives",
            "train_patients",
            "eval_rows",
            "tau",
            "rashomon_candidates",
            "rashomon_members",
            "rashomon_best_auc",
            "fallback_models",
            "notices",
        ])?;
        for p in &self.phases {
            w.write_record([
                p.key.schema.to_string(),
                p.key.seed.to_string(),
                p.key.strategy.to_string(),
                p.key.phase.to_string(),
                p.train_rows.to_string(),
                p.train_positives.to_string(),
                p.train_patients.to_string(),
                p.eval_rows.to_string(),
                opt(p.tau),
                p.rashomon_candidates.to_string(),
                p.rashomon_members.to_string(),
                opt(p.rashomon_best_auc),
                p.fallback_models.to_string(),
                p.notices.join(" | "),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv::Writer::from_path(dir.join("ledger.csv"))?;
        w.write_record([
            "schema",
            "seed",
            "strategy",
            "phase",
            "instance",
            "score",
            "pred",
            "abstained",
            "distance",
            "bootstrap",
            "rashomon",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.key.schema.to_string(),
                r.key.seed.to_string(),
                r.key.strategy.to_string(),
                r.key.phase.to_string(),
                r.instance.to_string(),
                r.score.to_string(),
                self.pred(r).map_or(String::new(), |p| p.to_string()),
                u8::from(r.abstained).to_string(),
                opt(r.distance),
                bits(&r.bootstrap),
                bits(&r.rashomon),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let p = dir.join("ledger.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let header: LedgerHeader = serde_json::from_str(&text)?;

        let mut instances = Vec::new();
        let mut r = open(&dir.join("instances.csv"))?;
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let idx: usize = field(&rec, 0, "instance")?;
            if idx != i {
                return Err(Error::Schema(format!("instances.csv: row {i} has index {idx}")));
            }
            let groups = (0..header.attributes.len())
                .map(|a| {
                    let s = rec.get(4 + a).unwrap_or("");
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse::<Group>().map(Some).map_err(Error::Schema)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            instances.push(InstanceInfo {
                patient_id: rec.get(1).unwrap_or("").to_string(),
                week_start: rec
                    .get(2)
                    .and_then(crate::dataio::parse_date)
                    .ok_or_else(|| Error::Schema(format!("instances.csv: bad date on row {i}")))?,
                label: field(&rec, 3, "label")?,
                groups,
            });
        }

        let mut phases = Vec::new();
        let mut r = open(&dir.join("phases.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            let notices = rec.get(13).unwrap_or("");
            phases.push(PhaseMeta {
                key: key_of(&rec)?,
                train_rows: field(&rec, 4, "train_rows")?,
                train_positives: field(&rec, 5, "train_positives")?,
                train_patients: field(&rec, 6, "train_patients")?,
                eval_rows: field(&rec, 7, "eval_rows")?,
                tau: opt_field(&rec, 8, "tau")?,
                rashomon_candidates: field(&rec, 9, "rashomon_candidates")?,
                rashomon_members: field(&rec, 10, "rashomon_members")?,
                rashomon_best_auc: opt_field(&rec, 11, "rashomon_best_auc")?,
                fallback_models: field(&rec, 12, "fallback_models")?,
                notices: if notices.is_empty() {
                    Vec::new()
                } else {
                    notices.split(" | ").map(str::to_string).collect()
                },
            });
        }

        let mut rows = Vec::new();
        let mut r = open(&dir.join("ledger.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            rows.push(LedgerRow {
                key: key_of(&rec)?,
                instance: field(&rec, 4, "instance")?,
                score: field(&rec, 5, "score")?,
                abstained: field::<u8>(&rec, 7, "abstained")? == 1,
                distance: opt_field(&rec, 8, "distance")?,
                bootstrap: unbits(rec.get(9).unwrap_or(""))?,
                rashomon: unbits(rec.get(10).unwrap_or(""))?,
            });
        }
        let ledger = Self {
            header,
            instances,
            phases,
            rows,
        };
        ledger.check_invariants()?;
        Ok(ledger)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn bits(v: &[u8]) -> String {
    v.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
}

fn unbits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::Schema(format!("bad bit string `{s}`"))),
        })
        .collect()
}

fn open(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(f))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let s = rec.get(i).unwrap_or("");
    s.parse()
        .map_err(|_| Error::Schema(format!("{name}: cannot parse `{s}`")))
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<Option<T>> {
    match rec.get(i) {
        None | Some("") => Ok(None),
        Some(_) => field(rec, i, name).map(Some),
    }
}

fn key_of(rec: &csv::StringRecord) -> Result<PhaseKey> {
    Ok(PhaseKey {
        schema: field(rec, 0, "schema")?,
        seed: field(rec, 1, "seed")?,
        strategy: field(rec, 2, "strategy")?,
        phase: field(rec, 3, "phase")?,
    })
}
