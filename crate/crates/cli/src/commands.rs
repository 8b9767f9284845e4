use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::{json, Value};

use retrain_audit::cgmfeat::{featurize, Thresholds};
use retrain_audit::dataio::{
    load_cgm_csv, load_meta_csv, load_weekly_csv, write_cgm_csv, write_meta_csv, write_weekly_csv, ProtectedAttr,
    WeeklyTable,
};
use retrain_audit::engine::{run_experiment, PredictionLedger};
use retrain_audit::kv::{self, KvConfig};
use retrain_audit::report::write_report;
use retrain_audit::synthgen::{gen_cgm_cohort, gen_cohort, CohortSpec, SynthOutput};
use retrain_audit::Error;

use crate::config::{Input, RunConfig};
use crate::CliError;

pub const OUT_ENV: &str = "RETRAIN_AUDIT_OUT";
const DEFAULT_OUT: &str = "retrain-audit-out";

type CliResult<T> = std::result::Result<T, CliError>;

/// `--out`, then the environment variable, then a directory in the cwd.
pub fn output_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("input file not found: {}", path.display())))
    }
}

fn mkdir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn pairs_json(pairs: &[(String, String)]) -> Value {
    Value::Object(pairs.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect())
}

pub fn cmd_synth(config: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    require_file(config)?;
    let mut kv = KvConfig::from_file(config)?;
    let spec = CohortSpec::from_kv(&mut kv)?;
    kv.finish()?;
    spec.validate()?;
    mkdir(out)?;
    let mut written = Vec::new();
    let truth = match spec.output {
        SynthOutput::Weekly => {
            let cohort = gen_cohort(&spec)?;
            let p = out.join("weekly.csv");
            write_weekly_csv(&p, &cohort.table)?;
            written.push(p);
            let p = out.join("meta.csv");
            write_meta_csv(&p, &cohort.table.patients)?;
            written.push(p);
            info!("synth: {} rows, {} patients", cohort.table.len(), cohort.table.patients.len());
            serde_json::to_value(&cohort.truth).map_err(Error::from)?
        }
        SynthOutput::Cgm => {
            let (streams, meta) = gen_cgm_cohort(&spec)?;
            let p = out.join("cgm.csv");
            write_cgm_csv(&p, &streams)?;
            written.push(p);
            let p = out.join("meta.csv");
            write_meta_csv(&p, &meta)?;
            written.push(p);
            info!("synth: {} patients of raw CGM", streams.len());
            Value::Null
        }
    };
    let p = out.join("manifest.json");
    let files: Vec<String> = written.iter().map(|f| file_name(f)).collect();
    write_json(
        &p,
        &json!({
            "tool": "retrain-audit",
            "version": env!("CARGO_PKG_VERSION"),
            "command": "synth",
            "spec": pairs_json(&spec.to_kv()),
            "ground_truth": truth,
            "files": files,
        }),
    )?;
    written.push(p);
    Ok(written)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn cmd_featurize(input: &Path, meta: Option<&Path>, out: &Path, thresholds: Thresholds) -> CliResult<WeeklyTable> {
    require_file(input)?;
    if let Some(m) = meta {
        require_file(m)?;
    }
    let table = featurize_files(input, meta, &thresholds)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    write_weekly_csv(out, &table)?;
    info!("featurize: {} weekly rows written to {}", table.len(), out.display());
    Ok(table)
}

fn featurize_files(input: &Path, meta: Option<&Path>, t: &Thresholds) -> CliResult<WeeklyTable> {
    let (streams, report) = load_cgm_csv(input)?;
    if !report.rejects.is_empty() || report.out_of_range > 0 || report.duplicates > 0 {
        warn!(
            "cgm input: {} rejected, {} out of range, {} duplicates",
            report.rejects.len(),
            report.out_of_range,
            report.duplicates
        );
    }
    let meta = match meta {
        Some(m) => load_meta_csv(m)?,
        None => BTreeMap::new(),
    };
    Ok(featurize(&streams, &meta, t)?)
}

/// Loads or generates the cohort a run config describes, with a summary
/// for the manifest.
fn load_input(input: &Input) -> CliResult<(WeeklyTable, Value)> {
    match input {
        Input::Weekly { path, columns } => {
            require_file(path)?;
            let (table, report) = load_weekly_csv(path, columns)?;
            if !report.rejects.is_empty() {
                warn!("weekly input: {} rows rejected", report.rejects.len());
            }
            let summary = json!({
                "kind": "weekly",
                "rows_read": report.rows_read,
                "accepted": report.accepted,
                "rejected": report.rejects.len(),
            });
            Ok((table, summary))
        }
        Input::Cgm { path, meta, thresholds } => {
            require_file(path)?;
            if let Some(m) = meta {
                require_file(m)?;
            }
            let table = featurize_files(path, meta.as_deref(), thresholds)?;
            Ok((table, json!({ "kind": "cgm" })))
        }
        Input::Synthetic(spec) => {
            if spec.output != SynthOutput::Weekly {
                return Err(CliError::Usage("synth.output must be weekly inside a run".into()));
            }
            let cohort = gen_cohort(spec)?;
            let truth = serde_json::to_value(&cohort.truth).map_err(Error::from)?;
            Ok((cohort.table, json!({ "kind": "synthetic", "ground_truth": truth })))
        }
    }
}

/// Returns the manifest path.
pub fn cmd_run(mut cfg: RunConfig, out: &Path, threads: Option<usize>) -> CliResult<PathBuf> {
    let (table, input_summary) = load_input(&cfg.input)?;
    cfg.experiment.protected = cfg
        .protected
        .iter()
        .map(|&(name, t)| ProtectedAttr::resolve(name, t, &table.patients))
        .collect::<retrain_audit::Result<_>>()?;
    cfg.output = None;
    cfg.absolutize_inputs();
    info!(
        "run: {} rows, {} patients, {} phases",
        table.len(),
        table.patients.len(),
        cfg.experiment.n_phases()
    );
    let run = run_experiment(&table, &cfg.experiment, threads)?;
    for meta in &run.ledger.phases {
        for n in &meta.notices {
            warn!("{} {} seed {} phase {}: {n}", meta.key.schema, meta.key.strategy, meta.key.seed, meta.key.phase);
        }
    }

    mkdir(out)?;
    let ledger_dir = out.join("ledger");
    run.ledger.write_dir(&ledger_dir)?;
    let report_dir = out.join("report");
    let report_files = write_report(&report_dir, &run.ledger)?;
    let resolved = cfg.to_kv();
    let p = out.join("config.resolved");
    fs::write(&p, kv::render(&resolved)).map_err(|e| Error::io(&p, e))?;

    let relative = |f: &Path| f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
    let manifest = json!({
        "tool": "retrain-audit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "run",
        "config": pairs_json(&resolved),
        "master_seed": cfg.experiment.master_seed,
        "seed_scheme": "derive_seed(master, [schema, seed, strategy, train_phase]) then [stream]; holdout s: derive_seed(master, [HOLDOUT, s])",
        "input": input_summary,
        "n_rows": table.len(),
        "n_patients": table.patients.len(),
        "n_phases": cfg.experiment.n_phases(),
        "ledger": {
            "dir": "ledger",
            "rows": run.ledger.rows.len(),
            "phases": run.ledger.phases.len(),
            "key_columns": ["schema", "seed", "strategy", "phase", "instance"],
        },
        "report_files": report_files.iter().map(|f| relative(f)).collect::<Vec<_>>(),
    });
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    info!("run: wrote {}", out.display());
    Ok(manifest_path)
}

/// Rebuilds the run configuration echoed in a manifest.
pub fn config_from_manifest(path: &Path) -> CliResult<RunConfig> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let pairs = v
        .get("config")
        .and_then(Value::as_object)
        .ok_or_else(|| CliError::Usage(format!("{}: no `config` entry", path.display())))?;
    let mut kv_pairs = Vec::new();
    for (k, v) in pairs {
        let v = v
            .as_str()
            .ok_or_else(|| CliError::Usage(format!("{}: config value of `{k}` is not a string", path.display())))?;
        kv_pairs.push((k.clone(), v.to_string()));
    }
    let kv = KvConfig::parse(&kv::render(&kv_pairs))?;
    Ok(RunConfig::from_kv(kv, None)?)
}

/// Accepts either a ledger directory or a run directory containing one.
pub fn cmd_report(ledger: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let dir = if ledger.join("ledger").join("ledger.json").is_file() {
        ledger.join("ledger")
    } else {
        ledger.to_path_buf()
    };
    require_file(&dir.join("ledger.json"))?;
    let ledger = PredictionLedger::read_dir(&dir)?;
    let files = write_report(out, &ledger)?;
    info!("report: {} files written to {}", files.len(), out.display());
    Ok(files)
}
