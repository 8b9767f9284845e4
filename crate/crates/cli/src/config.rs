//! The flat key-value run configuration.

use std::path::{Path, PathBuf};

use retrain_audit::abstain::AbstentionConfig;
use retrain_audit::cgmfeat::Thresholds;
use retrain_audit::dataio::{AttrName, ColumnMapping, WEEKLY_COLUMNS};
use retrain_audit::engine::{ExperimentConfig, RashomonConfig, Schema, Strategy};
use retrain_audit::kv::KvConfig;
use retrain_audit::learner::{ModelKind, TrainConfig};
use retrain_audit::synthgen::CohortSpec;
use retrain_audit::{Error, Result};

/// Where the weekly table comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Weekly {
        path: PathBuf,
        columns: ColumnMapping,
    },
    Cgm {
        path: PathBuf,
        meta: Option<PathBuf>,
        thresholds: Thresholds,
    },
    Synthetic(Box<CohortSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Input,
    pub experiment: ExperimentConfig,
    /// Attribute names with an optional threshold override; resolved
    /// against the loaded cohort.
    pub protected: Vec<(AttrName, Option<f64>)>,
    pub output: Option<PathBuf>,
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn thresholds_from(kv: &mut KvConfig, prefix: &str) -> Result<Thresholds> {
    let d = Thresholds::default();
    Ok(Thresholds {
        hyper: kv.take_or(&format!("{prefix}hyper"), d.hyper)?,
        hypo: kv.take_or(&format!("{prefix}hypo"), d.hypo)?,
        severe_hyper: kv.take_or(&format!("{prefix}severe_hyper"), d.severe_hyper)?,
        severe_min_duration: kv.take_or(&format!("{prefix}severe_min_duration"), d.severe_min_duration)?,
        gap_tolerance: kv.take_or(&format!("{prefix}gap_tolerance"), d.gap_tolerance)?,
        range_low: kv.take_or(&format!("{prefix}range_low"), d.range_low)?,
        range_high: kv.take_or(&format!("{prefix}range_high"), d.range_high)?,
        expected_cadence: kv.take_or(&format!("{prefix}expected_cadence"), d.expected_cadence)?,
    })
}

fn thresholds_kv(t: &Thresholds, prefix: &str) -> Vec<(String, String)> {
    [
        ("hyper", t.hyper.to_string()),
        ("hypo", t.hypo.to_string()),
        ("severe_hyper", t.severe_hyper.to_string()),
        ("severe_min_duration", t.severe_min_duration.to_string()),
        ("gap_tolerance", t.gap_tolerance.to_string()),
        ("range_low", t.range_low.to_string()),
        ("range_high", t.range_high.to_string()),
        ("expected_cadence", t.expected_cadence.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}{k}"), v))
    .collect()
}

fn prefix_unknown(e: Error, prefix: &str) -> Error {
    match e {
        Error::UnknownKey(k) => Error::UnknownKey(format!("{prefix}{k}")),
        other => other,
    }
}

/// Relative paths in a config file are taken relative to the file.
fn resolve_path(base: Option<&Path>, raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let kv = KvConfig::from_file(path)?;
        Self::from_kv(kv, path.parent())
    }

    pub fn from_kv(mut kv: KvConfig, base: Option<&Path>) -> Result<Self> {
        let weekly = kv.take_str("input.weekly");
        let cgm = kv.take_str("input.cgm");
        let meta = kv.take_str("input.meta");
        let synth_keys = kv.take_prefixed("synth.");
        let column_keys = kv.take_prefixed("column.");
        let extra_columns: Option<Vec<String>> = kv.take_list("column_extras")?;
        let threshold_keys = kv.take_prefixed("thresholds.");
        if cgm.is_none() && !threshold_keys.is_empty() {
            return Err(Error::Config("thresholds.* only apply to input.cgm".into()));
        }
        let mut tk = KvConfig::from_pairs(threshold_keys.iter().map(|(k, v)| (k.as_str(), v.clone())));
        let thresholds = thresholds_from(&mut tk, "")?;
        tk.finish().map_err(|e| prefix_unknown(e, "thresholds."))?;

        let sources = usize::from(weekly.is_some()) + usize::from(cgm.is_some()) + usize::from(!synth_keys.is_empty());
        if sources != 1 {
            return Err(Error::Config(
                "exactly one of input.weekly, input.cgm or synth.* must be given".into(),
            ));
        }
        let input = if let Some(w) = weekly {
            if meta.is_some() {
                return Err(Error::Config("input.meta only applies to input.cgm".into()));
            }
            let mut columns = ColumnMapping::default();
            for (canonical, header) in &column_keys {
                columns.set(canonical, header)?;
            }
            columns.extras = extra_columns.unwrap_or_default();
            Input::Weekly {
                path: resolve_path(base, &w),
                columns,
            }
        } else {
            if let Some((k, _)) = column_keys.first() {
                return Err(Error::Config(format!("column.{k} only applies to input.weekly")));
            }
            if let Some(c) = cgm {
                Input::Cgm {
                    path: resolve_path(base, &c),
                    meta: meta.map(|m| resolve_path(base, &m)),
                    thresholds,
                }
            } else {
                let mut sk = KvConfig::from_pairs(synth_keys.iter().map(|(k, v)| (k.as_str(), v.clone())));
                let spec = CohortSpec::from_kv(&mut sk).map_err(|e| prefix_unknown(e, "synth."))?;
                sk.finish().map_err(|e| prefix_unknown(e, "synth."))?;
                Input::Synthetic(Box::new(spec))
            }
        };

        let d = ExperimentConfig::default();
        let dl = TrainConfig::default();
        let learner = TrainConfig {
            kind: kv.take_or::<ModelKind>("learner.kind", dl.kind)?,
            learning_rate: kv.take_or("learner.learning_rate", dl.learning_rate)?,
            l2: kv.take_or("learner.l2", dl.l2)?,
            max_iter: kv.take_or("learner.max_iter", dl.max_iter)?,
            tol: kv.take_or("learner.tol", dl.tol)?,
            seed: 0,
            include_protected: kv.take_or("learner.include_protected", dl.include_protected)?,
            decision_threshold: kv.take_or("learner.decision_threshold", dl.decision_threshold)?,
        };
        let dr = RashomonConfig::default();
        let rashomon_on = kv.take_or("rashomon", true)?;
        let rashomon = RashomonConfig {
            m: kv.take_or("rashomon.m", dr.m)?,
            epsilon: kv.take_or("rashomon.epsilon", dr.epsilon)?,
            validation_fraction: kv.take_or("rashomon.validation_fraction", dr.validation_fraction)?,
        };
        let da = AbstentionConfig::default();
        let abstention_on = kv.take_or("abstention", true)?;
        let abstention = AbstentionConfig {
            k: kv.take_or("abstention.k", da.k)?,
            alpha: kv.take_or("abstention.alpha", da.alpha)?,
            calibration_fraction: kv.take_or("abstention.calibration_fraction", da.calibration_fraction)?,
        };
        let names: Vec<AttrName> = kv.take_list("protected")?.unwrap_or_else(|| vec![AttrName::Sex]);
        if names.is_empty() {
            return Err(Error::Config("protected must list at least one attribute".into()));
        }
        let mut protected = Vec::new();
        for name in names {
            let threshold = kv.take(&format!("protected.{name}.threshold"))?;
            protected.push((name, threshold));
        }

        let experiment = ExperimentConfig {
            strategies: kv.take_list("strategies")?.unwrap_or(d.strategies),
            schemas: kv.take_list("schemas")?.unwrap_or(d.schemas),
            n_batches: kv.take_or("n_batches", d.n_batches)?,
            holdout_fraction: kv.take_or("holdout_fraction", d.holdout_fraction)?,
            n_seeds: kv.take_or("n_seeds", d.n_seeds)?,
            bootstrap: kv.take_or("bootstrap", d.bootstrap)?,
            rashomon: rashomon_on.then_some(rashomon),
            protected: Vec::new(),
            features: kv.take_list("features")?.unwrap_or_default(),
            learner,
            abstention: abstention_on.then_some(abstention),
            master_seed: kv.take_or("seed", d.master_seed)?,
        };
        let output = kv.take_str("output").map(|o| resolve_path(base, &o));
        kv.finish()?;
        Ok(Self {
            input,
            experiment,
            protected,
            output,
        })
    }

    /// Replaces input paths by canonical absolute ones so an echoed config
    /// does not depend on the working directory.
    pub fn absolutize_inputs(&mut self) {
        let canon = |p: &mut PathBuf| {
            if let Ok(c) = std::fs::canonicalize(&*p) {
                *p = c;
            }
        };
        match &mut self.input {
            Input::Weekly { path, .. } => canon(path),
            Input::Cgm { path, meta, .. } => {
                canon(path);
                if let Some(m) = meta {
                    canon(m);
                }
            }
            Input::Synthetic(_) => {}
        }
    }

    /// The fully resolved configuration as `(key, value)` pairs, readable
    /// back by [`RunConfig::from_kv`]. Protected thresholds come from
    /// `experiment.protected` once resolved.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match &self.input {
            Input::Weekly { path, columns } => {
                put("input.weekly", path.display().to_string());
                for c in WEEKLY_COLUMNS {
                    if let Some(h) = columns.columns.get(c).filter(|h| h.as_str() != c) {
                        put(&format!("column.{c}"), h.clone());
                    }
                }
                if !columns.extras.is_empty() {
                    put("column_extras", columns.extras.join(","));
                }
            }
            Input::Cgm {
                path,
                meta,
                thresholds,
            } => {
                put("input.cgm", path.display().to_string());
                if let Some(m) = meta {
                    put("input.meta", m.display().to_string());
                }
                for (k, v) in thresholds_kv(thresholds, "thresholds.") {
                    put(&k, v);
                }
            }
            Input::Synthetic(spec) => {
                for (k, v) in spec.to_kv() {
                    put(&format!("synth.{k}"), v);
                }
            }
        }
        let e = &self.experiment;
        put("strategies", join(&e.strategies));
        put("schemas", join(&e.schemas));
        put("n_batches", e.n_batches.to_string());
        put("holdout_fraction", e.holdout_fraction.to_string());
        put("n_seeds", e.n_seeds.to_string());
        put("bootstrap", e.bootstrap.to_string());
        put("rashomon", e.rashomon.is_some().to_string());
        if let Some(r) = &e.rashomon {
            put("rashomon.m", r.m.to_string());
            put("rashomon.epsilon", r.epsilon.to_string());
            put("rashomon.validation_fraction", r.validation_fraction.to_string());
        }
        put("abstention", e.abstention.is_some().to_string());
        if let Some(a) = &e.abstention {
            put("abstention.k", a.k.to_string());
            put("abstention.alpha", a.alpha.to_string());
            put("abstention.calibration_fraction", a.calibration_fraction.to_string());
        }
        if e.protected.is_empty() {
            put("protected", join(&self.protected.iter().map(|p| p.0).collect::<Vec<_>>()));
            for (name, t) in &self.protected {
                if let Some(t) = t {
                    put(&format!("protected.{name}.threshold"), t.to_string());
                }
            }
        } else {
            put("protected", join(&e.protected.iter().map(|p| p.name).collect::<Vec<_>>()));
            for p in &e.protected {
                if let Some(t) = p.threshold {
                    put(&format!("protected.{}.threshold", p.name), t.to_string());
                }
            }
        }
        if !e.features.is_empty() {
            put("features", e.features.join(","));
        }
        let l = &e.learner;
        put("learner.kind", l.kind.to_string());
        put("learner.learning_rate", l.learning_rate.to_string());
        put("learner.l2", l.l2.to_string());
        put("learner.max_iter", l.max_iter.to_string());
        put("learner.tol", l.tol.to_string());
        put("learner.include_protected", l.include_protected.to_string());
        put("learner.decision_threshold", l.decision_threshold.to_string());
        put("seed", e.master_seed.to_string());
        if let Some(o) = &self.output {
            put("output", o.display().to_string());
        }
        out
    }
}

/// Strategy and schema names accepted in lists.
pub fn describe_choices() -> String {
    format!(
        "strategies: {}; schemas: {}",
        join(&Strategy::ALL),
        join(&Schema::ALL)
    )
}
