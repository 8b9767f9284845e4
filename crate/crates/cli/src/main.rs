//! `retrain-audit`: synthesize cohorts, featurize CGM data, run retraining
//! experiments and rebuild reports from a persisted ledger.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use retrain_audit::cgmfeat::Thresholds;
use retrain_audit::Error;

use crate::commands::{cmd_featurize, cmd_report, cmd_run, cmd_synth, config_from_manifest, output_dir};
use crate::config::{describe_choices, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e {
                Error::Config(_) | Error::UnknownKey(_) | Error::Schema(_) | Error::Csv(_) => 2,
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Parser)]
#[command(name = "retrain-audit", version, about = "Continual-retraining audit toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort from a key-value spec file.
    Synth {
        /// Cohort spec (`key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: $RETRAIN_AUDIT_OUT or ./retrain-audit-out].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a raw CGM CSV into a labeled weekly CSV.
    Featurize(FeaturizeArgs),
    /// Run the retraining experiment described by a config file or a
    /// previous run's manifest.
    #[command(after_help = describe_choices())]
    Run {
        #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Re-run from the configuration echoed in a manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory [default: config `output`, then $RETRAIN_AUDIT_OUT].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Rebuild report tables from a persisted ledger.
    Report {
        /// Ledger directory, or a run directory containing `ledger/`.
        #[arg(long)]
        ledger: PathBuf,
        /// Output directory [default: $RETRAIN_AUDIT_OUT or ./retrain-audit-out].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Raw CGM CSV (patient_id, timestamp, glucose_mgdl).
    #[arg(long)]
    input: PathBuf,
    /// Optional patient metadata CSV.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Weekly CSV to write [default: <output dir>/weekly.csv].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 180.0)]
    hyper: f64,
    #[arg(long, default_value_t = 250.0)]
    severe_hyper: f64,
    /// Minutes.
    #[arg(long, default_value_t = 180)]
    severe_min_duration: i64,
    #[arg(long, default_value_t = 70.0)]
    hypo: f64,
    /// Minutes.
    #[arg(long, default_value_t = 30)]
    gap_tolerance: i64,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => {
            cmd_synth(&config, &output_dir(out))?;
        }
        Command::Featurize(a) => {
            let thresholds = Thresholds {
                hyper: a.hyper,
                hypo: a.hypo,
                severe_hyper: a.severe_hyper,
                severe_min_duration: a.severe_min_duration,
                gap_tolerance: a.gap_tolerance,
                ..Thresholds::default()
            };
            let out = a.out.unwrap_or_else(|| output_dir(None).join("weekly.csv"));
            cmd_featurize(&a.input, a.meta.as_deref(), &out, thresholds)?;
        }
        Command::Run {
            config,
            manifest,
            out,
            threads,
        } => {
            let cfg = match (config, manifest) {
                (Some(c), _) => {
                    if !c.is_file() {
                        return Err(CliError::Usage(format!("config file not found: {}", c.display())));
                    }
                    RunConfig::from_file(&c)?
                }
                (None, Some(m)) => config_from_manifest(&m)?,
                (None, None) => return Err(CliError::Usage("need --config or --manifest".into())),
            };
            if threads == Some(0) {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            let out = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| output_dir(None));
            cmd_run(cfg, &out, threads)?;
        }
        Command::Report { ledger, out } => {
            cmd_report(&ledger, &output_dir(out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
