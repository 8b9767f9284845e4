//! Continual-retraining experiments.
//!
//! A run is a job graph over (schema, seed, strategy, phase). Each job
//! builds its training set, fits the main model, a bootstrap ensemble and
//! optionally a Rashomon candidate family and a conformal abstainer, then
//! scores its evaluation instances. Jobs share only immutable inputs and
//! every random draw comes from a stream derived from the master seed and
//! the job's structural key, so the ledger is identical for any thread
//! count.
//!
//! Seed paths (see [`crate::seed::derive_seed`]):
//!
//! * holdout of retrospective seed `s`: `[HOLDOUT, s]`
//! * job base: `[schema, s, strategy, train_phase]`, where `train_phase`
//!   is 1 for the frozen strategy and `t` otherwise
//! * per job stream: `derive_seed(base, [SUBSET | BOOTSTRAP | RASHOMON | ABSTAIN])`
//! * bootstrap replica `b`: `rng_for(bootstrap_seed, [b])`; Rashomon
//!   candidate `m`: `rng_for(rashomon_seed, [m])`

pub mod ledger;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ledger::{InstanceInfo, LedgerHeader, LedgerRow, PhaseKey, PhaseMeta, PredictionLedger};

use crate::abstain::{AbstentionConfig, Abstainer};
use crate::dataio::{self, BatchPlan, Group, ProtectedAttr, WeeklyTable};
use crate::learner::{self, Dataset, Model, TrainConfig};
use crate::metrics::Metric;
use crate::seed::{self, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Train once on batch 0 and never update.
    None,
    /// Batch `t-1` only.
    Last,
    /// Random rows of batches `0..t`, as many as the mean batch size.
    Subset,
    /// All of batches `0..t`.
    Full,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::Last, Strategy::Subset, Strategy::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Last => "last",
            Strategy::Subset => "subset",
            Strategy::Full => "full",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Phase `t` is evaluated on batch `t`.
    Prospective,
    /// Every phase is evaluated on one fixed patient-level holdout.
    Retrospective,
}

impl Schema {
    pub const ALL: [Schema; 2] = [Schema::Prospective, Schema::Retrospective];

    pub fn as_str(self) -> &'static str {
        match self {
            Schema::Prospective => "prospective",
            Schema::Retrospective => "retrospective",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Schema {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Schema::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| format!("unknown schema `{s}`"))
    }
}

/// L2 strengths cycled over Rashomon candidates.
pub const RASHOMON_L2_GRID: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RashomonConfig {
    pub m: usize,
    /// AUC tolerance below the best candidate.
    pub epsilon: f64,
    /// Patient-level share of the phase training set used for validation.
    pub validation_fraction: f64,
}

impl Default for RashomonConfig {
    fn default() -> Self {
        Self {
            m: 20,
            epsilon: 0.01,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategies: Vec<Strategy>,
    pub schemas: Vec<Schema>,
    pub n_batches: usize,
    pub holdout_fraction: f64,
    /// Retrospective repetitions, each with its own holdout.
    pub n_seeds: usize,
    pub bootstrap: usize,
    pub rashomon: Option<RashomonConfig>,
    /// Resolved attributes; the first one also stratifies the holdout.
    pub protected: Vec<ProtectedAttr>,
    /// Model inputs by name; empty means every table feature.
    pub features: Vec<String>,
    pub learner: TrainConfig,
    pub abstention: Option<AbstentionConfig>,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            schemas: Schema::ALL.to_vec(),
            n_batches: 6,
            holdout_fraction: 0.10,
            n_seeds: 10,
            bootstrap: 30,
            rashomon: Some(RashomonConfig::default()),
            protected: vec![ProtectedAttr::sex()],
            features: Vec::new(),
            learner: TrainConfig::default(),
            abstention: Some(AbstentionConfig::default()),
            master_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.schemas.is_empty() {
            return Err(Error::Config("need at least one strategy and one schema".into()));
        }
        if self.n_batches < 2 {
            return Err(Error::Config("n_batches must be >= 2".into()));
        }
        if self.bootstrap < 2 {
            return Err(Error::Config("bootstrap must be >= 2".into()));
        }
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config("holdout_fraction must lie in (0,1)".into()));
        }
        if let Some(r) = &self.rashomon {
            if r.m < 2 {
                return Err(Error::Config("rashomon m must be >= 2".into()));
            }
            if !(r.epsilon >= 0.0) {
                return Err(Error::Config("rashomon epsilon must be >= 0".into()));
            }
            if !(r.validation_fraction > 0.0 && r.validation_fraction < 1.0) {
                return Err(Error::Config("rashomon validation_fraction must lie in (0,1)".into()));
            }
        }
        if let Some(a) = &self.abstention {
            if a.k == 0 || !(a.alpha > 0.0 && a.alpha < 1.0) {
                return Err(Error::Config("abstention needs k >= 1 and alpha in (0,1)".into()));
            }
        }
        self.learner.validate()
    }

    pub fn n_phases(&self) -> usize {
        self.n_batches - 1
    }
}

/// The full design matrix of a table: selected features followed by one
/// group indicator per protected attribute (A = 0, B = 1, missing = 0.5).
#[derive(Debug, Clone)]
pub struct Design {
    pub data: Dataset,
    /// Patient index of every row, for patient-level splits.
    pub units: Vec<usize>,
}

pub fn build_design(table: &WeeklyTable, cfg: &ExperimentConfig) -> Result<Design> {
    let all = table.feature_names();
    let cols: Vec<usize> = if cfg.features.is_empty() {
        (0..all.len()).collect()
    } else {
        cfg.features
            .iter()
            .map(|f| {
                all.iter()
                    .position(|a| a == f)
                    .ok_or_else(|| Error::UnknownKey(format!("features: {f}")))
            })
            .collect::<Result<_>>()?
    };
    let mut names: Vec<String> = cols.iter().map(|&c| all[c].clone()).collect();
    let protected_columns: Vec<usize> = (names.len()..names.len() + cfg.protected.len()).collect();
    names.extend(cfg.protected.iter().map(|a| format!("group_{}", a.name)));
    let rows: Vec<Vec<f64>> = (0..table.len())
        .map(|i| {
            let full = table.feature_row(i);
            let mut r: Vec<f64> = cols.iter().map(|&c| full[c]).collect();
            r.extend(cfg.protected.iter().map(|a| match table.group_of(i, a) {
                Some(Group::A) => 0.0,
                Some(Group::B) => 1.0,
                None => 0.5,
            }));
            r
        })
        .collect();
    let labels = table.observations.iter().map(|o| o.label).collect();
    let ids: BTreeMap<&str, usize> = table
        .patients
        .keys()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let units = table
        .observations
        .iter()
        .map(|o| ids[o.patient_id.as_str()])
        .collect();
    Ok(Design {
        data: Dataset::new(&rows, labels, names, protected_columns)?,
        units,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Ascending row indices.
    pub rows: Vec<usize>,
    pub notice: Option<String>,
}

/// Rows used to train phase `t` (1-based) under `strategy`, given the row
/// indices of each chronological batch.
pub fn training_set_for(
    strategy: Strategy,
    t: usize,
    batches: &[Vec<usize>],
    seed_value: u64,
) -> Result<TrainingSet> {
    if t == 0 || t > batches.len() {
        return Err(Error::Config(format!(
            "phase {t} needs batches 0..{t}, have {}",
            batches.len()
        )));
    }
    let union = || -> Vec<usize> {
        let mut u: Vec<usize> = batches[..t].iter().flatten().copied().collect();
        u.sort_unstable();
        u
    };
    let (rows, notice) = match strategy {
        Strategy::None => (batches[0].clone(), None),
        Strategy::Last => (batches[t - 1].clone(), None),
        Strategy::Full => (union(), None),
        Strategy::Subset => {
            let u = union();
            let mean_size = u.len() as f64 / t as f64;
            let size = mean_size.round() as usize;
            if size >= u.len() {
                let n = u.len();
                (u, Some(format!("subset size {size} >= union size {n}, using the full union")))
            } else {
                let mut rng = seed::rng_for(seed_value, &[]);
                let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, u.len(), size)
                    .into_iter()
                    .map(|i| u[i])
                    .collect();
                picked.sort_unstable();
                (picked, None)
            }
        }
    };
    if let Some(n) = &notice {
        log::info!("{strategy} t={t}: {n}");
    }
    Ok(TrainingSet { rows, notice })
}

fn single_class(y: &[u8]) -> bool {
    y.iter().all(|&v| v == y[0])
}

fn positive_rate(y: &[u8]) -> f64 {
    y.iter().map(|&v| f64::from(v)).sum::<f64>() / y.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub models: Vec<Model>,
    /// Replicas replaced by a constant-score model.
    pub fallbacks: usize,
}

/// Maximum redraws of a single-class bootstrap resample.
pub const MAX_RESAMPLE_RETRIES: usize = 10;

fn resample_fit(train: &Dataset, rng: &mut impl Rng, cfg: &TrainConfig) -> Result<Option<Model>> {
    let n = train.len();
    for _ in 0..MAX_RESAMPLE_RETRIES {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let ds = train.select(&idx);
        if single_class(ds.labels()) {
            continue;
        }
        return learner::fit(&ds, cfg).map(Some);
    }
    Ok(None)
}

/// `b` models, each fit on a same-size with-replacement resample.
pub fn bootstrap_ensemble(train: &Dataset, b: usize, seed_value: u64, cfg: &TrainConfig) -> Result<Ensemble> {
    if b < 2 {
        return Err(Error::Config("bootstrap needs b >= 2".into()));
    }
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let fitted: Vec<Option<Model>> = (0..b)
        .into_par_iter()
        .map(|r| resample_fit(train, &mut seed::rng_for(seed_value, &[r as u64]), cfg))
        .collect::<Result<_>>()?;
    let rate = positive_rate(train.labels());
    let fallbacks = fitted.iter().filter(|m| m.is_none()).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} of {b} bootstrap replicas stayed single-class; using constant models");
    }
    let models = fitted
        .into_iter()
        .map(|m| m.unwrap_or_else(|| Model::constant(rate, train.dim(), cfg)))
        .collect();
    Ok(Ensemble { models, fallbacks })
}

#[derive(Debug, Clone)]
pub struct RashomonSet {
    pub candidates: Vec<Model>,
    /// Validation AUC per candidate; undefined for degenerate candidates.
    pub val_auc: Vec<Metric>,
    /// Indices of candidates within epsilon of the best, ascending.
    pub members: Vec<usize>,
    pub best_auc: f64,
}

/// Candidate family of `m` bootstrap fits with L2 cycled over
/// [`RASHOMON_L2_GRID`], filtered to validation AUC `>= best - epsilon`.
pub fn rashomon_set(
    train: &Dataset,
    validation: &Dataset,
    cfg: &RashomonConfig,
    seed_value: u64,
    learner_cfg: &TrainConfig,
) -> Result<RashomonSet> {
    if cfg.m < 2 {
        return Err(Error::Config("rashomon needs m >= 2".into()));
    }
    if validation.is_empty() || train.is_empty() {
        return Err(Error::Training("rashomon needs non-empty training and validation sets".into()));
    }
    let fitted: Vec<(Model, Metric)> = (0..cfg.m)
        .into_par_iter()
        .map(|m| {
            let c = TrainConfig {
                l2: RASHOMON_L2_GRID[m % RASHOMON_L2_GRID.len()],
                ..*learner_cfg
            };
            let mut rng = seed::rng_for(seed_value, &[m as u64]);
            match resample_fit(train, &mut rng, &c)? {
                Some(model) => {
                    let auc = learner::evaluate_auc(&model, validation)?;
                    Ok((model, auc))
                }
                None => Ok((
                    Model::constant(positive_rate(train.labels()), train.dim(), &c),
                    Metric::Undefined(crate::metrics::Undefined::SingleClass),
                )),
            }
        })
        .collect::<Result<_>>()?;
    let best = fitted
        .iter()
        .filter_map(|(_, a)| a.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::Training("all Rashomon candidates are degenerate".into()));
    }
    let members = fitted
        .iter()
        .enumerate()
        .filter(|(_, (_, a))| a.value().is_some_and(|v| v >= best - cfg.epsilon))
        .map(|(i, _)| i)
        .collect();
    let (candidates, val_auc) = fitted.into_iter().unzip();
    Ok(RashomonSet {
        candidates,
        val_auc,
        members,
        best_auc: best,
    })
}

/// Splits `rows` by unit: a seeded `fraction` of the distinct units (at
/// least one, and never all when there are two or more) goes to the second
/// set. Both outputs are ascending.
pub fn split_units(rows: &[usize], units: &[usize], fraction: f64, seed_value: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = rows
        .iter()
        .map(|&r| units[r])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut seed::rng_for(seed_value, &[]));
    let k = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let held: BTreeSet<usize> = ids[..k.min(ids.len())].iter().copied().collect();
    rows.iter().partition(|&&r| !held.contains(&units[r]))
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub ledger: PredictionLedger,
    /// Training rows of every phase, by key.
    pub training_rows: BTreeMap<PhaseKey, Vec<usize>>,
    /// Main model of every phase that trained one.
    pub models: BTreeMap<PhaseKey, Model>,
    /// Batch plan per (schema, seed); prospective uses seed 0 only.
    pub plans: BTreeMap<(Schema, usize), BatchPlan>,
}

struct Arm {
    schema: Schema,
    seed: usize,
    plan: BatchPlan,
    batches: Vec<Vec<usize>>,
    /// Evaluation rows per phase (index `t`); retrospective repeats the holdout.
    eval: Vec<Vec<usize>>,
}

struct PhaseOutput {
    meta: PhaseMeta,
    rows: Vec<LedgerRow>,
    training_rows: Vec<usize>,
    model: Option<Model>,
}

fn arms_for(table: &WeeklyTable, cfg: &ExperimentConfig, schema: Schema) -> Result<Vec<Arm>> {
    let n = cfg.n_batches;
    match schema {
        Schema::Prospective => {
            let plan = dataio::make_batches(table, n)?;
            let batches: Vec<Vec<usize>> = (0..n).map(|k| plan.batch_rows(table, k)).collect();
            if batches.iter().filter(|b| !b.is_empty()).count() < 2 {
                return Err(Error::Config("prospective evaluation needs >= 2 non-empty batches".into()));
            }
            let eval = batches.clone();
            Ok(vec![Arm {
                schema,
                seed: 0,
                plan,
                batches,
                eval,
            }])
        }
        Schema::Retrospective => (0..cfg.n_seeds)
            .map(|s| {
                let hseed = seed::derive_seed(cfg.master_seed, &[stream::HOLDOUT, s as u64]);
                let (holdout, remainder) =
                    dataio::make_holdout(table, cfg.holdout_fraction, hseed, cfg.protected.first())?;
                let mut plan = dataio::make_batches(&remainder, n)?;
                plan.holdout = holdout;
                let batches: Vec<Vec<usize>> = (0..n).map(|k| plan.batch_rows(table, k)).collect();
                let h = plan.holdout_rows(table);
                Ok(Arm {
                    schema,
                    seed: s,
                    plan,
                    batches,
                    eval: vec![h; n],
                })
            })
            .collect(),
    }
}

struct Ctx<'a> {
    design: &'a Design,
    cfg: &'a ExperimentConfig,
}

fn run_phase(ctx: &Ctx, arm: &Arm, strategy: Strategy, t: usize) -> Result<PhaseOutput> {
    let cfg = ctx.cfg;
    let key = PhaseKey {
        schema: arm.schema,
        seed: arm.seed,
        strategy,
        phase: t,
    };
    let train_phase = if strategy == Strategy::None { 1 } else { t };
    let base = seed::derive_seed(
        cfg.master_seed,
        &[arm.schema.id(), arm.seed as u64, strategy.id(), train_phase as u64],
    );
    let sub = |tag: u64| seed::derive_seed(base, &[tag]);

    let mut notices = Vec::new();
    let ts = training_set_for(strategy, train_phase, &arm.batches, sub(stream::SUBSET))?;
    notices.extend(ts.notice);
    let train_rows = ts.rows;
    let eval = &arm.eval[t];
    let train = ctx.design.data.select(&train_rows);
    let train_positives = train.labels().iter().filter(|&&y| y == 1).count();
    let train_patients = train_rows
        .iter()
        .map(|&r| ctx.design.units[r])
        .collect::<BTreeSet<_>>()
        .len();
    let mut meta = PhaseMeta {
        key,
        train_rows: train_rows.len(),
        train_positives,
        train_patients,
        eval_rows: 0,
        tau: None,
        rashomon_candidates: 0,
        rashomon_members: 0,
        rashomon_best_auc: None,
        fallback_models: 0,
        notices: Vec::new(),
    };
    let skip = |mut meta: PhaseMeta, mut notices: Vec<String>, why: String| {
        log::warn!("{} {} seed {} phase {}: {why}", key.schema, key.strategy, key.seed, key.phase);
        notices.push(why);
        meta.notices = notices;
        PhaseOutput {
            meta,
            rows: Vec::new(),
            training_rows: train_rows.clone(),
            model: None,
        }
    };
    if train.is_empty() {
        return Ok(skip(meta, notices, "empty training set, phase skipped".into()));
    }
    if eval.is_empty() {
        return Ok(skip(meta, notices, "empty evaluation set, phase skipped".into()));
    }

    let main = if single_class(train.labels()) {
        notices.push("single-class training set, constant-score model".into());
        Model::constant(positive_rate(train.labels()), train.dim(), &cfg.learner)
    } else {
        learner::fit(&train, &cfg.learner)?
    };
    let eval_x: Vec<&[f64]> = eval.iter().map(|&i| ctx.design.data.row(i)).collect();
    let scores: Vec<f64> = eval_x
        .iter()
        .map(|x| main.predict_proba(x))
        .collect::<Result<_>>()?;

    let ens = bootstrap_ensemble(&train, cfg.bootstrap, sub(stream::BOOTSTRAP), &cfg.learner)?;
    meta.fallback_models = ens.fallbacks;
    if ens.fallbacks > 0 {
        notices.push(format!("{} bootstrap replicas replaced by constant models", ens.fallbacks));
    }
    let boot: Vec<Vec<u8>> = ens
        .models
        .iter()
        .map(|m| eval_x.iter().map(|x| m.predict(x)).collect::<Result<Vec<u8>>>())
        .collect::<Result<_>>()?;

    let mut rash: Vec<Vec<u8>> = Vec::new();
    if let Some(rc) = &cfg.rashomon {
        let (fit_rows, val_rows) =
            split_units(&train_rows, &ctx.design.units, rc.validation_fraction, sub(stream::RASHOMON));
        let fit_ds = ctx.design.data.select(&fit_rows);
        let val_ds = ctx.design.data.select(&val_rows);
        let usable = !fit_ds.is_empty()
            && !val_ds.is_empty()
            && !single_class(val_ds.labels())
            && !single_class(fit_ds.labels());
        if !usable {
            notices.push("rashomon validation split unusable, multiplicity not computed".into());
        } else {
            match rashomon_set(&fit_ds, &val_ds, rc, sub(stream::RASHOMON), &cfg.learner) {
                Ok(rs) => {
                    meta.rashomon_candidates = rs.candidates.len();
                    meta.rashomon_members = rs.members.len();
                    meta.rashomon_best_auc = Some(rs.best_auc);
                    for &m in &rs.members {
                        rash.push(
                            eval_x
                                .iter()
                                .map(|x| rs.candidates[m].predict(x))
                                .collect::<Result<_>>()?,
                        );
                    }
                }
                Err(Error::Training(e)) => notices.push(format!("rashomon: {e}")),
                Err(e) => return Err(e),
            }
        }
    }

    let mut decisions: Vec<(Option<f64>, bool)> = vec![(None, false); eval.len()];
    if let Some(ac) = &cfg.abstention {
        let z: Vec<Vec<f64>> = train_rows
            .iter()
            .map(|&r| main.standardize(ctx.design.data.row(r)))
            .collect::<Result<_>>()?;
        let units: Vec<usize> = train_rows.iter().map(|&r| ctx.design.units[r]).collect();
        match Abstainer::calibrate(&z, &units, ac, sub(stream::ABSTAIN)) {
            Ok(a) => {
                meta.tau = Some(a.tau);
                for (d, x) in decisions.iter_mut().zip(&eval_x) {
                    let (dist, abst) = a.decide(&main.standardize(x)?)?;
                    *d = (Some(dist), abst);
                }
            }
            Err(Error::Calibration(e)) => {
                log::warn!("abstention disabled for {key:?}: {e}");
                notices.push(format!("abstention disabled: {e}"));
            }
            Err(e) => return Err(e),
        }
    }

    let rows = eval
        .iter()
        .enumerate()
        .map(|(j, &inst)| LedgerRow {
            key,
            instance: inst,
            score: scores[j],
            abstained: decisions[j].1,
            distance: decisions[j].0,
            bootstrap: boot.iter().map(|b| b[j]).collect(),
            rashomon: rash.iter().map(|r| r[j]).collect(),
        })
        .collect::<Vec<_>>();
    meta.eval_rows = rows.len();
    meta.notices = notices;
    Ok(PhaseOutput {
        meta,
        rows,
        training_rows: train_rows,
        model: Some(main),
    })
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs the given schemas. `threads = None` uses the global rayon pool.
pub fn run_schemas(
    table: &WeeklyTable,
    cfg: &ExperimentConfig,
    schemas: &[Schema],
    threads: Option<usize>,
) -> Result<ExperimentRun> {
    cfg.validate()?;
    if table.is_empty() {
        return Err(Error::Config("empty weekly table".into()));
    }
    let design = build_design(table, cfg)?;
    let ctx = Ctx {
        design: &design,
        cfg,
    };
    let mut schemas = schemas.to_vec();
    schemas.sort();
    schemas.dedup();
    let mut strategies = cfg.strategies.clone();
    strategies.sort();
    strategies.dedup();

    let mut arms = Vec::new();
    for &s in &schemas {
        arms.extend(arms_for(table, cfg, s)?);
    }
    let jobs: Vec<(usize, Strategy, usize)> = arms
        .iter()
        .enumerate()
        .flat_map(|(a, _)| {
            strategies
                .iter()
                .flat_map(move |&st| (1..=cfg.n_phases()).map(move |t| (a, st, t)))
        })
        .collect();
    let outputs: Vec<PhaseOutput> = with_threads(threads, || {
        jobs.par_iter()
            .map(|&(a, st, t)| run_phase(&ctx, &arms[a], st, t))
            .collect::<Result<Vec<_>>>()
    })??;

    let instances = (0..table.len())
        .map(|i| {
            let o = &table.observations[i];
            InstanceInfo {
                patient_id: o.patient_id.clone(),
                week_start: o.week_start,
                label: o.label,
                groups: cfg.protected.iter().map(|a| table.group_of(i, a)).collect(),
            }
        })
        .collect();
    let mut run = ExperimentRun {
        ledger: PredictionLedger {
            header: LedgerHeader {
                decision_threshold: cfg.learner.decision_threshold,
                n_phases: cfg.n_phases(),
                attributes: cfg.protected.clone(),
                bootstrap: cfg.bootstrap,
            },
            instances,
            phases: Vec::with_capacity(outputs.len()),
            rows: Vec::new(),
        },
        training_rows: BTreeMap::new(),
        models: BTreeMap::new(),
        plans: arms
            .into_iter()
            .map(|a| ((a.schema, a.seed), a.plan))
            .collect(),
    };
    for out in outputs {
        let key = out.meta.key;
        run.ledger.rows.extend(out.rows);
        run.ledger.phases.push(out.meta);
        run.training_rows.insert(key, out.training_rows);
        if let Some(m) = out.model {
            run.models.insert(key, m);
        }
    }
    run.ledger.check_invariants()?;
    Ok(run)
}

/// Prospective schema only.
pub fn run_prospective(table: &WeeklyTable, cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentRun> {
    run_schemas(table, cfg, &[Schema::Prospective], threads)
}

/// Retrospective schema only, `cfg.n_seeds` holdouts.
pub fn run_retrospective(table: &WeeklyTable, cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentRun> {
    run_schemas(table, cfg, &[Schema::Retrospective], threads)
}

/// Every schema listed in the configuration.
pub fn run_experiment(table: &WeeklyTable, cfg: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentRun> {
    run_schemas(table, cfg, &cfg.schemas, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_cohort, CohortSpec};

    fn batches() -> Vec<Vec<usize>> {
        // sizes 10, 12, 8, 10, 10, 5
        let sizes = [10, 12, 8, 10, 10, 5];
        let mut start = 0;
        sizes
            .iter()
            .map(|&n| {
                let b: Vec<usize> = (start..start + n).collect();
                start += n;
                b
            })
            .collect()
    }

    #[test]
    fn training_sets_per_strategy() {
        let b = batches();
        let full = training_set_for(Strategy::Full, 3, &b, 1).unwrap().rows;
        assert_eq!(full, (0..30).collect::<Vec<_>>());
        let last = training_set_for(Strategy::Last, 3, &b, 1).unwrap().rows;
        assert_eq!(last, (22..30).collect::<Vec<_>>());
        let none = training_set_for(Strategy::None, 4, &b, 1).unwrap().rows;
        assert_eq!(none, (0..10).collect::<Vec<_>>());
        let sub = training_set_for(Strategy::Subset, 5, &b, 1).unwrap();
        assert_eq!(sub.rows.len(), 10);
        assert!(sub.rows.iter().all(|r| *r < 50));
        assert_eq!(sub.rows, training_set_for(Strategy::Subset, 5, &b, 1).unwrap().rows);
        assert!(training_set_for(Strategy::Full, 0, &b, 1).is_err());
    }

    #[test]
    fn subset_falls_back_to_union_when_too_large() {
        let b = vec![vec![0, 1, 2], vec![]];
        let ts = training_set_for(Strategy::Subset, 2, &b, 1).unwrap();
        // mean size round(1.5) = 2 < 3: a real sample
        assert_eq!(ts.rows.len(), 2);
        let b = vec![vec![0]];
        let ts = training_set_for(Strategy::Subset, 1, &b, 1).unwrap();
        assert_eq!(ts.rows, vec![0]);
        assert!(ts.notice.is_some());
    }

    #[test]
    fn strategy_and_schema_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        for s in Schema::ALL {
            assert_eq!(s.to_string().parse::<Schema>().unwrap(), s);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    fn noisy_data(n: usize, seed_value: u64) -> Dataset {
        let mut rng = seed::rng_for(seed_value, &[]);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0])
            .collect();
        let y = rows
            .iter()
            .map(|r| u8::from(r[0] + 0.5 * r[1] + (rng.random::<f64>() - 0.5) * 1.5 > 0.0))
            .collect();
        Dataset::new(&rows, y, vec!["a".into(), "b".into()], vec![]).unwrap()
    }

    #[test]
    fn bootstrap_is_reproducible_and_diverse() {
        let d = noisy_data(200, 1);
        let cfg = TrainConfig::default();
        let a = bootstrap_ensemble(&d, 30, 5, &cfg).unwrap();
        let b = bootstrap_ensemble(&d, 30, 5, &cfg).unwrap();
        assert_eq!(a.models.len(), 30);
        assert_eq!(a.models, b.models);
        assert_ne!(a.models[0].weights(), a.models[1].weights());
        assert_eq!(a.fallbacks, 0);
    }

    #[test]
    fn bootstrap_falls_back_on_degenerate_data() {
        // two rows of different class: each draw is single-class with
        // probability 1/2, so a replica falls back with probability 2^-10
        let rows: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0]];
        let d = Dataset::new(&rows, vec![0, 1], vec!["a".into()], vec![]).unwrap();
        let cfg = TrainConfig { max_iter: 5, ..Default::default() };
        let e = bootstrap_ensemble(&d, 8000, 3, &cfg).unwrap();
        assert_eq!(e.models.len(), 8000);
        assert!(e.fallbacks > 0);
        assert!(e.models.iter().filter(|m| m.fit_info.constant).count() == e.fallbacks);
    }

    #[test]
    fn rashomon_epsilon_extremes() {
        let train = noisy_data(300, 2);
        let val = noisy_data(150, 3);
        let cfg = TrainConfig::default();
        let all = rashomon_set(&train, &val, &RashomonConfig { m: 12, epsilon: 1.0, validation_fraction: 0.2 }, 4, &cfg).unwrap();
        assert_eq!(all.members.len(), 12);
        let tight = rashomon_set(&train, &val, &RashomonConfig { m: 12, epsilon: 0.0, validation_fraction: 0.2 }, 4, &cfg).unwrap();
        assert!(!tight.members.is_empty());
        for &m in &tight.members {
            assert_eq!(tight.val_auc[m].value().unwrap(), tight.best_auc);
        }
        let mid = rashomon_set(&train, &val, &RashomonConfig { m: 12, epsilon: 0.01, validation_fraction: 0.2 }, 4, &cfg).unwrap();
        assert!((1..=12).contains(&mid.members.len()));
        let again = rashomon_set(&train, &val, &RashomonConfig { m: 12, epsilon: 0.01, validation_fraction: 0.2 }, 4, &cfg).unwrap();
        assert_eq!(mid.members, again.members);
    }

    #[test]
    fn rashomon_with_single_class_validation_is_an_error() {
        let train = noisy_data(100, 2);
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 5];
        let val = Dataset::new(&rows, vec![0; 5], vec!["a".into(), "b".into()], vec![]).unwrap();
        assert!(rashomon_set(&train, &val, &RashomonConfig::default(), 1, &TrainConfig::default()).is_err());
    }

    #[test]
    fn split_units_keeps_units_whole() {
        let units: Vec<usize> = (0..100).map(|i| i / 5).collect();
        let rows: Vec<usize> = (0..100).collect();
        let (a, b) = split_units(&rows, &units, 0.2, 9);
        assert_eq!(a.len() + b.len(), 100);
        assert_eq!(b.len(), 20);
        let ua: BTreeSet<usize> = a.iter().map(|&r| units[r]).collect();
        assert!(b.iter().all(|r| !ua.contains(&units[*r])));
    }

    fn small_run(schemas: &[Schema]) -> (WeeklyTable, ExperimentRun) {
        let cohort = gen_cohort(&CohortSpec {
            n_patients: 60,
            weeks_min: 4,
            weeks_max: 12,
            date_span_days: 240,
            seed: 11,
            ..Default::default()
        })
        .unwrap();
        let cfg = ExperimentConfig {
            n_seeds: 2,
            bootstrap: 4,
            rashomon: Some(RashomonConfig { m: 4, ..Default::default() }),
            learner: TrainConfig { max_iter: 100, ..Default::default() },
            ..Default::default()
        };
        let run = run_schemas(&cohort.table, &cfg, schemas, None).unwrap();
        (cohort.table, run)
    }

    #[test]
    fn frozen_model_is_identical_across_phases() {
        let (_, run) = small_run(&[Schema::Prospective]);
        let frozen: Vec<&Model> = run
            .models
            .iter()
            .filter(|(k, _)| k.strategy == Strategy::None)
            .map(|(_, m)| m)
            .collect();
        assert_eq!(frozen.len(), 5);
        assert!(frozen.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn ledger_completeness_and_disjointness() {
        let (table, run) = small_run(&Schema::ALL);
        let l = &run.ledger;
        for p in &l.phases {
            let rows = l.rows_for(p.key);
            assert_eq!(rows.len(), p.eval_rows);
            let train: BTreeSet<&str> = run.training_rows[&p.key]
                .iter()
                .map(|&r| table.observations[r].patient_id.as_str())
                .collect();
            assert!(rows
                .iter()
                .all(|r| !train.contains(table.observations[r.instance].patient_id.as_str())));
        }
        // retrospective holdout is the same at every phase of a seed
        let h1: Vec<usize> = l
            .rows_for(PhaseKey { schema: Schema::Retrospective, seed: 1, strategy: Strategy::Full, phase: 1 })
            .iter()
            .map(|r| r.instance)
            .collect();
        let h5: Vec<usize> = l
            .rows_for(PhaseKey { schema: Schema::Retrospective, seed: 1, strategy: Strategy::Full, phase: 5 })
            .iter()
            .map(|r| r.instance)
            .collect();
        assert_eq!(h1, h5);
        assert!(!h1.is_empty());
    }

    #[test]
    fn nesting_of_training_sets() {
        let (_, run) = small_run(&[Schema::Prospective]);
        for (k, rows) in &run.training_rows {
            if matches!(k.strategy, Strategy::Last | Strategy::Subset) {
                let full: BTreeSet<usize> = run.training_rows[&PhaseKey { strategy: Strategy::Full, ..*k }]
                    .iter()
                    .copied()
                    .collect();
                assert!(rows.iter().all(|r| full.contains(r)), "{k:?}");
            }
        }
    }
}
