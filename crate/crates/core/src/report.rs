//! Per-phase reports computed from a ledger, and their aggregation across
//! seeds into summary tables and plot data.
//!
//! Every metric is computed twice per phase: over all evaluated instances,
//! and (suffix `_ret`) over the instances the abstainer retained. Retained
//! metrics are `undefined:not-run` when abstention did not run.
//!
//! Aggregation: per seed, a phase-averaged value over the phases where the
//! metric is defined; across seeds, the mean with a normal-approximation
//! 95% interval `mean +- 1.96 sd / sqrt(n)`. Undefined entries are skipped
//! and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::abstain::{equity_table, is_high_abstention};
use crate::dataio::{AttrName, Group};
use crate::engine::{LedgerRow, PhaseKey, PredictionLedger, Schema, Strategy};
use crate::metrics::{
    self, auc, dp_gap, eo_gap, flip_rate, group_auc_and_gap, individual_stability, multiplicity,
    overall_arbitrariness, self_consistency, wasserstein1, InstanceStability, IndividualStability,
    Metric, Undefined,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Overall,
    A,
    B,
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue {
    pub name: &'static str,
    pub scope: Scope,
    pub value: Metric,
    /// Instances (or models, for multiplicity) behind the value.
    pub n: usize,
}

/// Metric names in report column order.
pub const PHASE_METRICS: [&str; 28] = [
    "auc",
    "auc_a",
    "auc_b",
    "auc_gap",
    "delta_auc",
    "eo_gap",
    "dp_gap",
    "mean_sc",
    "oa",
    "sa",
    "flip_rate",
    "dpr",
    "dr",
    "rashomon_size",
    "abstention_rate",
    "abstention_rate_a",
    "abstention_rate_b",
    "auc_ret",
    "auc_a_ret",
    "auc_b_ret",
    "auc_gap_ret",
    "delta_auc_ret",
    "eo_gap_ret",
    "dp_gap_ret",
    "mean_sc_ret",
    "oa_ret",
    "sa_ret",
    "flip_rate_ret",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub schema: Schema,
    pub seed: usize,
    pub strategy: Strategy,
    pub phase: usize,
    pub attribute: AttrName,
    pub decision_threshold: f64,
    pub train_rows: usize,
    pub train_positive_rate: Option<f64>,
    pub n_eval: usize,
    pub n_group_a: usize,
    pub n_group_b: usize,
    pub n_group_missing: usize,
    pub tau: Option<f64>,
    pub notices: Vec<String>,
    pub metrics: Vec<MetricValue>,
}

impl PhaseReport {
    pub fn get(&self, name: &str) -> Metric {
        self.metrics
            .iter()
            .find(|m| m.name == name)
            .map_or(Metric::Undefined(Undefined::NoData), |m| m.value)
    }
}

fn scope_of(name: &str) -> Scope {
    let base = name.trim_end_matches("_ret");
    if base.ends_with("_a") {
        Scope::A
    } else if base.ends_with("_b") {
        Scope::B
    } else if base.ends_with("_gap") || base == "sa" {
        Scope::Gap
    } else {
        Scope::Overall
    }
}

struct View<'a> {
    rows: Vec<&'a LedgerRow>,
}

/// Performance, fairness and self-consistency metrics over one set of rows.
fn core_block(
    ledger: &PredictionLedger,
    view: &View,
    attr: usize,
    suffix: &str,
    out: &mut BTreeMap<String, (Metric, usize)>,
) -> Result<()> {
    let n = view.rows.len();
    let scores: Vec<f64> = view.rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = view
        .rows
        .iter()
        .map(|r| ledger.instances[r.instance].label)
        .collect();
    let groups: Vec<Option<Group>> = view
        .rows
        .iter()
        .map(|r| ledger.instances[r.instance].groups[attr])
        .collect();
    let preds: Vec<u8> = view.rows.iter().map(|r| ledger.baseline_pred(r)).collect();
    let count = |g: Group| groups.iter().filter(|x| **x == Some(g)).count();
    let (na, nb) = (count(Group::A), count(Group::B));

    let empty = Metric::Undefined(Undefined::EmptySample);
    let mut put = |name: &str, m: Metric, k: usize| {
        out.insert(format!("{name}{suffix}"), (m, k));
    };
    if n == 0 {
        for name in ["auc", "auc_a", "auc_b", "auc_gap", "eo_gap", "dp_gap", "mean_sc", "oa", "sa"] {
            put(name, empty, 0);
        }
        return Ok(());
    }
    let g = group_auc_and_gap(&scores, &labels, &groups)?;
    put("auc", auc(&scores, &labels)?, n);
    put("auc_a", g.a, na);
    put("auc_b", g.b, nb);
    put("auc_gap", g.gap, na + nb);
    put("eo_gap", eo_gap(&preds, &labels, &groups), na + nb);
    put("dp_gap", dp_gap(&preds, &groups), na + nb);
    let sc: Vec<f64> = view
        .rows
        .iter()
        .map(|r| self_consistency(&r.bootstrap))
        .collect::<Result<_>>()?;
    put("mean_sc", metrics::mean(&sc).into(), n);
    put("oa", overall_arbitrariness(&sc), n);
    let pick = |g: Group| -> Vec<f64> {
        sc.iter()
            .zip(&groups)
            .filter(|(_, x)| **x == Some(g))
            .map(|(s, _)| *s)
            .collect()
    };
    put("sa", wasserstein1(&pick(Group::A), &pick(Group::B)), na + nb);
    Ok(())
}

fn rate(num: usize, den: usize) -> Metric {
    if den == 0 {
        Metric::Undefined(Undefined::EmptySample)
    } else {
        Metric::Value(num as f64 / den as f64)
    }
}

/// Phase reports for every (phase, attribute) of the ledger, ordered by
/// (schema, seed, strategy, attribute, phase).
pub fn phase_reports(ledger: &PredictionLedger) -> Result<Vec<PhaseReport>> {
    ledger.check_invariants()?;
    let t_max = ledger.header.n_phases;
    let mut reports = Vec::new();
    for (schema, seed, strategy) in ledger.arms() {
        let key = |phase| PhaseKey {
            schema,
            seed,
            strategy,
            phase,
        };
        // instance -> per-phase (baseline, retained) prediction
        let mut series: BTreeMap<usize, Vec<(Option<u8>, Option<u8>)>> = BTreeMap::new();
        for t in 1..=t_max {
            for r in ledger.rows_for(key(t)) {
                series.entry(r.instance).or_insert_with(|| vec![(None, None); t_max])[t - 1] =
                    (Some(ledger.baseline_pred(r)), ledger.pred(r));
            }
        }
        let base_series: Vec<Vec<Option<u8>>> =
            series.values().map(|s| s.iter().map(|p| p.0).collect()).collect();
        let ret_series: Vec<Vec<Option<u8>>> =
            series.values().map(|s| s.iter().map(|p| p.1).collect()).collect();

        for (ai, attr) in ledger.header.attributes.iter().enumerate() {
            let mut prev: [Metric; 2] = [Metric::Undefined(Undefined::TooFewPhases); 2];
            for t in 1..=t_max {
                let k = key(t);
                let meta = ledger.phase_meta(k);
                let rows = ledger.rows_for(k);
                let ran = meta.is_some_and(|m| m.tau.is_some());
                let mut vals: BTreeMap<String, (Metric, usize)> = BTreeMap::new();

                core_block(ledger, &View { rows: rows.iter().collect() }, ai, "", &mut vals)?;
                if ran {
                    let kept = View {
                        rows: rows.iter().filter(|r| !r.abstained).collect(),
                    };
                    core_block(ledger, &kept, ai, "_ret", &mut vals)?;
                } else {
                    for name in PHASE_METRICS.iter().filter(|n| n.ends_with("_ret")) {
                        vals.insert(name.to_string(), (Metric::Undefined(Undefined::NotRun), 0));
                    }
                }

                for (i, suffix) in ["", "_ret"].iter().enumerate() {
                    let name = format!("auc{suffix}");
                    let cur = vals[&name].0;
                    let d = if t == 1 {
                        Metric::Undefined(Undefined::TooFewPhases)
                    } else if !ran && i == 1 {
                        Metric::Undefined(Undefined::NotRun)
                    } else {
                        match (prev[i], cur) {
                            (Metric::Value(a), Metric::Value(b)) => Metric::Value(b - a),
                            _ => Metric::Undefined(Undefined::Propagated),
                        }
                    };
                    vals.insert(format!("delta_auc{suffix}"), (d, rows.len()));
                    prev[i] = cur;
                }

                let flips = |s: &[Vec<Option<u8>>]| {
                    if schema == Schema::Prospective {
                        Metric::Undefined(Undefined::NoData)
                    } else if t == t_max {
                        Metric::Undefined(Undefined::TooFewPhases)
                    } else {
                        flip_rate(s, t - 1)
                    }
                };
                vals.insert("flip_rate".into(), (flips(&base_series), base_series.len()));
                vals.insert(
                    "flip_rate_ret".into(),
                    if ran {
                        (flips(&ret_series), ret_series.len())
                    } else {
                        (Metric::Undefined(Undefined::NotRun), 0)
                    },
                );

                let members = rows.first().map_or(0, |r| r.rashomon.len());
                if members == 0 {
                    let why = if meta.is_some_and(|m| m.rashomon_candidates > 0) {
                        Undefined::TooFewModels
                    } else {
                        Undefined::NotRun
                    };
                    vals.insert("dpr".into(), (Metric::Undefined(why), 0));
                    vals.insert("dr".into(), (Metric::Undefined(why), 0));
                } else {
                    let vectors: Vec<Vec<u8>> = (0..members)
                        .map(|m| rows.iter().map(|r| r.rashomon[m]).collect())
                        .collect();
                    let mult = multiplicity(&vectors)?;
                    vals.insert("dpr".into(), (Metric::Value(mult.dpr as f64), members));
                    vals.insert("dr".into(), (mult.dr, members));
                }
                vals.insert(
                    "rashomon_size".into(),
                    match meta {
                        Some(m) if m.rashomon_candidates > 0 => {
                            (Metric::Value(m.rashomon_members as f64), m.rashomon_candidates)
                        }
                        _ => (Metric::Undefined(Undefined::NotRun), 0),
                    },
                );

                let groups: Vec<Option<Group>> = rows
                    .iter()
                    .map(|r| ledger.instances[r.instance].groups[ai])
                    .collect();
                let abst = |g: Option<Group>| {
                    let (num, den) = rows
                        .iter()
                        .zip(&groups)
                        .filter(|(_, x)| g.is_none() || **x == g)
                        .fold((0, 0), |(a, n), (r, _)| (a + usize::from(r.abstained), n + 1));
                    if ran {
                        (rate(num, den), den)
                    } else {
                        (Metric::Undefined(Undefined::NotRun), 0)
                    }
                };
                vals.insert("abstention_rate".into(), abst(None));
                vals.insert("abstention_rate_a".into(), abst(Some(Group::A)));
                vals.insert("abstention_rate_b".into(), abst(Some(Group::B)));

                let metrics_out = PHASE_METRICS
                    .iter()
                    .map(|&name| {
                        let (value, n) = vals
                            .get(name)
                            .copied()
                            .ok_or_else(|| Error::Invariant(format!("metric {name} not computed")))?;
                        Ok(MetricValue {
                            name,
                            scope: scope_of(name),
                            value,
                            n,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let count = |g: Option<Group>| groups.iter().filter(|x| **x == g).count();
                reports.push(PhaseReport {
                    schema,
                    seed,
                    strategy,
                    phase: t,
                    attribute: attr.name,
                    decision_threshold: ledger.header.decision_threshold,
                    train_rows: meta.map_or(0, |m| m.train_rows),
                    train_positive_rate: meta
                        .filter(|m| m.train_rows > 0)
                        .map(|m| m.train_positives as f64 / m.train_rows as f64),
                    n_eval: rows.len(),
                    n_group_a: count(Some(Group::A)),
                    n_group_b: count(Some(Group::B)),
                    n_group_missing: count(None),
                    tau: meta.and_then(|m| m.tau),
                    notices: meta.map_or_else(Vec::new, |m| m.notices.clone()),
                    metrics: metrics_out,
                });
            }
        }
    }
    Ok(reports)
}

/// Stability of one individual in one retrospective arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndividualRecord {
    pub seed: usize,
    pub strategy: Strategy,
    pub stability: IndividualStability,
    pub groups: Vec<Option<Group>>,
    pub evaluated_weeks: usize,
    pub abstained_weeks: usize,
    /// `None` when abstention did not run in every phase.
    pub high_abstention: Option<bool>,
}

/// Per-individual stability over the retrospective holdout. Instances not
/// evaluated at every phase are skipped.
pub fn individual_records(ledger: &PredictionLedger) -> Result<Vec<IndividualRecord>> {
    let t_max = ledger.header.n_phases;
    let mut out = Vec::new();
    for (schema, seed, strategy) in ledger.arms() {
        if schema != Schema::Retrospective {
            continue;
        }
        let key = |phase| PhaseKey {
            schema,
            seed,
            strategy,
            phase,
        };
        let ran = (1..=t_max).all(|t| ledger.phase_meta(key(t)).is_some_and(|m| m.tau.is_some()));
        let mut per: BTreeMap<usize, Vec<&LedgerRow>> = BTreeMap::new();
        for t in 1..=t_max {
            for r in ledger.rows_for(key(t)) {
                per.entry(r.instance).or_default().push(r);
            }
        }
        let mut by_patient: BTreeMap<&str, Vec<(InstanceStability, usize, usize)>> = BTreeMap::new();
        for (inst, rows) in &per {
            if rows.len() != t_max {
                continue;
            }
            let sc: Vec<f64> = rows
                .iter()
                .map(|r| self_consistency(&r.bootstrap))
                .collect::<Result<_>>()?;
            let preds: Vec<Option<u8>> = rows.iter().map(|r| Some(ledger.baseline_pred(r))).collect();
            if let Some(s) = InstanceStability::new(sc, &preds) {
                let abstained = rows.iter().filter(|r| r.abstained).count();
                by_patient
                    .entry(ledger.instances[*inst].patient_id.as_str())
                    .or_default()
                    .push((s, rows.len(), abstained));
            }
        }
        let first_instance: BTreeMap<&str, usize> = ledger
            .instances
            .iter()
            .enumerate()
            .rev()
            .map(|(i, x)| (x.patient_id.as_str(), i))
            .collect();
        for (pid, weeks) in by_patient {
            let refs: Vec<&InstanceStability> = weeks.iter().map(|w| &w.0).collect();
            let Some(stability) = individual_stability(pid, &refs) else {
                continue;
            };
            let evaluated: usize = weeks.iter().map(|w| w.1).sum();
            let abstained: usize = weeks.iter().map(|w| w.2).sum();
            out.push(IndividualRecord {
                seed,
                strategy,
                stability,
                groups: ledger.instances[first_instance[pid]].groups.clone(),
                evaluated_weeks: evaluated,
                abstained_weeks: abstained,
                high_abstention: ran.then(|| is_high_abstention(abstained, evaluated)),
            });
        }
    }
    Ok(out)
}

/// Mean and normal-approximation 95% interval of the defined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: Metric,
    pub ci_lo: Metric,
    pub ci_hi: Metric,
    /// Defined values used.
    pub n: usize,
    /// Undefined values skipped.
    pub excluded: usize,
    /// A single defined value: the interval has zero width.
    pub degenerate: bool,
}

pub fn aggregate(values: &[Metric]) -> Aggregate {
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    let n = defined.len();
    let excluded = values.len() - n;
    if n == 0 {
        let u = Metric::Undefined(Undefined::NoData);
        return Aggregate {
            mean: u,
            ci_lo: u,
            ci_hi: u,
            n,
            excluded,
            degenerate: false,
        };
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let half = if n > 1 {
        let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    Aggregate {
        mean: Metric::Value(mean),
        ci_lo: Metric::Value(mean - half),
        ci_hi: Metric::Value(mean + half),
        n,
        excluded,
        degenerate: n == 1,
    }
}

/// Phase average of the defined values, undefined if none are.
pub fn phase_average(values: &[Metric]) -> Metric {
    let defined: Vec<f64> = values.iter().filter_map(|m| m.value()).collect();
    metrics::mean(&defined).into()
}

/// Table I columns and the phase metric each averages.
pub const TABLE1_COLUMNS: [(&str, &str); 5] = [
    ("av_auc", "auc"),
    ("delta_auc", "auc_gap"),
    ("eo", "eo_gap"),
    ("dp", "dp_gap"),
    ("oa", "oa"),
];

/// Table II columns.
pub const TABLE2_COLUMNS: [&str; 3] = ["pct_fr_instability", "pct_low_tsc", "pct_high_abstention"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub schema: Schema,
    pub attribute: AttrName,
    pub strategy: Strategy,
    pub cells: Vec<(&'static str, Aggregate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub attribute: AttrName,
    pub group: Group,
    pub strategy: Strategy,
    pub n_individuals: usize,
    pub cells: Vec<(&'static str, Aggregate)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub schema: Schema,
    pub attribute: AttrName,
    pub strategy: Strategy,
    pub phase: usize,
    pub metric: &'static str,
    pub agg: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub trajectories: Vec<TrajectoryPoint>,
}

type ArmAttr = (Schema, AttrName, Strategy);

/// Seed aggregation of phase reports and individual records.
pub fn build_report(reports: &[PhaseReport], individuals: &[IndividualRecord], attributes: &[AttrName]) -> ExperimentReport {
    // (schema, attr, strategy) -> seed -> phase reports
    let mut by_arm: BTreeMap<ArmAttr, BTreeMap<usize, Vec<&PhaseReport>>> = BTreeMap::new();
    for r in reports {
        by_arm
            .entry((r.schema, r.attribute, r.strategy))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    let mut table1 = Vec::new();
    let mut trajectories = Vec::new();
    for (&(schema, attribute, strategy), seeds) in &by_arm {
        let cells = TABLE1_COLUMNS
            .iter()
            .map(|&(col, metric)| {
                let per_seed: Vec<Metric> = seeds
                    .values()
                    .map(|rs| phase_average(&rs.iter().map(|r| r.get(metric)).collect::<Vec<_>>()))
                    .collect();
                (col, aggregate(&per_seed))
            })
            .collect();
        table1.push(Table1Row {
            schema,
            attribute,
            strategy,
            cells,
        });
        let phases: BTreeSet<usize> = seeds.values().flatten().map(|r| r.phase).collect();
        for phase in phases {
            for metric in PHASE_METRICS {
                let vals: Vec<Metric> = seeds
                    .values()
                    .flatten()
                    .filter(|r| r.phase == phase)
                    .map(|r| r.get(metric))
                    .collect();
                trajectories.push(TrajectoryPoint {
                    schema,
                    attribute,
                    strategy,
                    phase,
                    metric,
                    agg: aggregate(&vals),
                });
            }
        }
    }

    let mut table2 = Vec::new();
    let strategies: BTreeSet<Strategy> = individuals.iter().map(|r| r.strategy).collect();
    for (ai, &attribute) in attributes.iter().enumerate() {
        for group in [Group::A, Group::B] {
            for &strategy in &strategies {
                let mut per_seed: BTreeMap<usize, Vec<&IndividualRecord>> = BTreeMap::new();
                for r in individuals
                    .iter()
                    .filter(|r| r.strategy == strategy && r.groups.get(ai).copied().flatten() == Some(group))
                {
                    per_seed.entry(r.seed).or_default().push(r);
                }
                let n_individuals = per_seed.values().map(Vec::len).sum();
                let pct = |f: &dyn Fn(&IndividualRecord) -> Option<bool>| -> Aggregate {
                    let vals: Vec<Metric> = per_seed
                        .values()
                        .map(|rs| {
                            let flags: Option<Vec<bool>> = rs.iter().map(|r| f(r)).collect();
                            match flags {
                                Some(v) if !v.is_empty() => Metric::Value(
                                    100.0 * v.iter().filter(|&&b| b).count() as f64 / v.len() as f64,
                                ),
                                Some(_) => Metric::Undefined(Undefined::EmptyGroup),
                                None => Metric::Undefined(Undefined::NotRun),
                            }
                        })
                        .collect();
                    aggregate(&vals)
                };
                let cells = vec![
                    (TABLE2_COLUMNS[0], pct(&|r| Some(r.stability.unstable_by_flips))),
                    (TABLE2_COLUMNS[1], pct(&|r| Some(r.stability.unstable_by_tsc))),
                    (TABLE2_COLUMNS[2], pct(&|r| r.high_abstention)),
                ];
                table2.push(Table2Row {
                    attribute,
                    group,
                    strategy,
                    n_individuals,
                    cells,
                });
            }
        }
    }
    ExperimentReport {
        table1,
        table2,
        trajectories,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Writes every report file into `dir` and returns the paths written.
pub fn write_report(dir: &Path, ledger: &PredictionLedger) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let reports = phase_reports(ledger)?;
    let individuals = individual_records(ledger)?;
    let attrs: Vec<AttrName> = ledger.header.attributes.iter().map(|a| a.name).collect();
    let report = build_report(&reports, &individuals, &attrs);
    let mut written = Vec::new();

    let p = dir.join("phase_reports.json");
    fs::write(&p, serde_json::to_string_pretty(&reports)? + "\n").map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let p = dir.join("table1.csv");
    let mut w = csv_writer(&p)?;
    let mut head = vec!["schema", "attribute", "strategy"];
    head.extend(TABLE1_COLUMNS.iter().map(|c| c.0));
    head.push("n_seeds");
    w.write_record(&head)?;
    for row in &report.table1 {
        let mut rec = vec![row.schema.to_string(), row.attribute.to_string(), row.strategy.to_string()];
        rec.extend(row.cells.iter().map(|(_, a)| a.mean.to_string()));
        rec.push(row.cells.iter().map(|(_, a)| a.n + a.excluded).max().unwrap_or(0).to_string());
        w.write_record(&rec)?;
    }
    finish(w, &p)?;
    written.push(p);

    let p = dir.join("table2.csv");
    let mut w = csv_writer(&p)?;
    let mut head = vec!["attribute", "group", "strategy", "n_individuals"];
    head.extend(TABLE2_COLUMNS);
    w.write_record(&head)?;
    for row in &report.table2 {
        let mut rec = vec![
            row.attribute.to_string(),
            row.group.to_string(),
            row.strategy.to_string(),
            row.n_individuals.to_string(),
        ];
        rec.extend(row.cells.iter().map(|(_, a)| a.mean.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, &p)?;
    written.push(p);

    let p = dir.join("summary.csv");
    let mut w = csv_writer(&p)?;
    w.write_record([
        "table", "schema", "attribute", "group", "strategy", "metric", "mean", "ci_lo", "ci_hi", "n", "excluded",
        "degenerate_ci",
    ])?;
    let agg_fields = |a: &Aggregate| {
        vec![
            a.mean.to_string(),
            a.ci_lo.to_string(),
            a.ci_hi.to_string(),
            a.n.to_string(),
            a.excluded.to_string(),
            a.degenerate.to_string(),
        ]
    };
    for row in &report.table1 {
        for (col, a) in &row.cells {
            let mut rec = vec![
                "table1".to_string(),
                row.schema.to_string(),
                row.attribute.to_string(),
                String::new(),
                row.strategy.to_string(),
                col.to_string(),
            ];
            rec.extend(agg_fields(a));
            w.write_record(&rec)?;
        }
    }
    for row in &report.table2 {
        for (col, a) in &row.cells {
            let mut rec = vec![
                "table2".to_string(),
                Schema::Retrospective.to_string(),
                row.attribute.to_string(),
                row.group.to_string(),
                row.strategy.to_string(),
                col.to_string(),
            ];
            rec.extend(agg_fields(a));
            w.write_record(&rec)?;
        }
    }
    finish(w, &p)?;
    written.push(p);

    let p = dir.join("plot_data.csv");
    let mut w = csv_writer(&p)?;
    w.write_record([
        "schema", "attribute", "phase", "strategy", "metric", "mean", "ci_lo", "ci_hi", "n", "excluded",
    ])?;
    for t in &report.trajectories {
        w.write_record([
            t.schema.to_string(),
            t.attribute.to_string(),
            t.phase.to_string(),
            t.strategy.to_string(),
            t.metric.to_string(),
            t.agg.mean.to_string(),
            t.agg.ci_lo.to_string(),
            t.agg.ci_hi.to_string(),
            t.agg.n.to_string(),
            t.agg.excluded.to_string(),
        ])?;
    }
    finish(w, &p)?;
    written.push(p);

    let phase_dir = dir.join("phases");
    fs::create_dir_all(&phase_dir).map_err(|e| Error::io(&phase_dir, e))?;
    let mut grouped: BTreeMap<ArmAttr, Vec<&TrajectoryPoint>> = BTreeMap::new();
    for t in &report.trajectories {
        grouped.entry((t.schema, t.attribute, t.strategy)).or_default().push(t);
    }
    for ((schema, attribute, strategy), points) in grouped {
        let p = phase_dir.join(format!("{schema}_{strategy}_{attribute}.csv"));
        let mut w = csv_writer(&p)?;
        let mut head = vec!["phase".to_string()];
        head.extend(PHASE_METRICS.iter().map(|m| m.to_string()));
        head.push("n_seeds".into());
        w.write_record(&head)?;
        let phases: BTreeSet<usize> = points.iter().map(|t| t.phase).collect();
        for phase in phases {
            let row: Vec<&&TrajectoryPoint> = points.iter().filter(|t| t.phase == phase).collect();
            let mut rec = vec![phase.to_string()];
            rec.extend(row.iter().map(|t| t.agg.mean.to_string()));
            rec.push(row.iter().map(|t| t.agg.n + t.agg.excluded).max().unwrap_or(0).to_string());
            w.write_record(&rec)?;
        }
        finish(w, &p)?;
        written.push(p);
    }

    let p = dir.join("individuals.csv");
    let mut w = csv_writer(&p)?;
    let mut head: Vec<String> = [
        "seed",
        "strategy",
        "patient_id",
        "mean_flip_fraction",
        "min_sc",
        "sc_slope",
        "mean_tsc",
        "unstable_by_flips",
        "unstable_by_tsc",
        "evaluated_weeks",
        "abstained_weeks",
        "high_abstention",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    head.extend(attrs.iter().map(|a| format!("group_{a}")));
    w.write_record(&head)?;
    for r in &individuals {
        let s = &r.stability;
        let mut rec = vec![
            r.seed.to_string(),
            r.strategy.to_string(),
            s.patient_id.clone(),
            opt(s.mean_flip_fraction),
            s.min_sc.to_string(),
            s.sc_slope.to_string(),
            s.mean_tsc.to_string(),
            s.unstable_by_flips.to_string(),
            s.unstable_by_tsc.to_string(),
            r.evaluated_weeks.to_string(),
            r.abstained_weeks.to_string(),
            r.high_abstention.map_or(String::new(), |b| b.to_string()),
        ];
        rec.extend(r.groups.iter().map(|g| g.map_or(String::new(), |g| g.to_string())));
        w.write_record(&rec)?;
    }
    finish(w, &p)?;
    written.push(p);

    if ledger.phases.iter().any(|p| p.tau.is_some()) {
        written.extend(write_abstention(dir, ledger)?);
    }
    Ok(written)
}

fn write_abstention(dir: &Path, ledger: &PredictionLedger) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let attrs: Vec<AttrName> = ledger.header.attributes.iter().map(|a| a.name).collect();
    let p = dir.join("abstention_log.csv");
    let mut w = csv_writer(&p)?;
    let mut head: Vec<String> = [
        "schema",
        "seed",
        "strategy",
        "phase",
        "instance_id",
        "patient_id",
        "distance",
        "tau",
        "abstained",
        "score",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    head.extend(attrs.iter().map(|a| format!("group_{a}")));
    w.write_record(&head)?;
    for meta in ledger.phases.iter().filter(|m| m.tau.is_some()) {
        for r in ledger.rows_for(meta.key) {
            let inst = &ledger.instances[r.instance];
            let mut rec = vec![
                r.key.schema.to_string(),
                r.key.seed.to_string(),
                r.key.strategy.to_string(),
                r.key.phase.to_string(),
                r.instance.to_string(),
                inst.patient_id.clone(),
                opt(r.distance),
                opt(meta.tau),
                u8::from(r.abstained).to_string(),
                r.score.to_string(),
            ];
            rec.extend(inst.groups.iter().map(|g| g.map_or(String::new(), |g| g.to_string())));
            w.write_record(&rec)?;
        }
    }
    finish(w, &p)?;
    written.push(p);

    for (ai, attr) in attrs.iter().enumerate() {
        let p = dir.join(format!("equity_{attr}.csv"));
        let mut w = csv_writer(&p)?;
        w.write_record([
            "schema",
            "seed",
            "strategy",
            "group",
            "n_instances",
            "n_abstained",
            "abstention_rate",
            "n_individuals",
            "n_high_abstention",
            "pct_high_abstention",
        ])?;
        for (schema, seed, strategy) in ledger.arms() {
            let decisions = ledger
                .phases
                .iter()
                .filter(|m| m.key.arm() == (schema, seed, strategy) && m.tau.is_some())
                .flat_map(|m| ledger.rows_for(m.key))
                .map(|r| {
                    let inst = &ledger.instances[r.instance];
                    (inst.patient_id.as_str(), inst.groups[ai], r.abstained)
                });
            for row in equity_table(decisions) {
                w.write_record([
                    schema.to_string(),
                    seed.to_string(),
                    strategy.to_string(),
                    row.group.map_or("missing".to_string(), |g| g.to_string()),
                    row.n_instances.to_string(),
                    row.n_abstained.to_string(),
                    row.abstention_rate.to_string(),
                    row.n_individuals.to_string(),
                    row.n_high_abstention.to_string(),
                    row.pct_high_abstention.to_string(),
                ])?;
            }
        }
        finish(w, &p)?;
        written.push(p);
    }
    Ok(written)
}
