//! Command-line entry point: `resfl-sim run|sweep|attack|report`.
//!
//! Exit codes are 0 on success, 1 when a run fails and 2 for usage or
//! configuration errors.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attacks::AttackKind;
use crate::error::{Error, Result};
use crate::metrics::render_metrics;
use commands::*;
use config::{resolve_output_dir, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "resfl-sim", version, about = "Fairness- and privacy-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config and $RESFL_SIM_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured aggregator on every seed.
    Run(Common),
    /// RESFL over the ablation grid of loss coefficients.
    Sweep(Common),
    /// Paired attack measurements, upserted into attacks.csv.
    Attack {
        /// mia, aia, byzantine or poisoning.
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Summarise the result files of an output directory into report.md.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure of a command, already classified by exit code.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

struct Prepared {
    config: ExperimentConfig,
    out: PathBuf,
    pool: rayon::ThreadPool,
}

fn prepare(common: &Common) -> std::result::Result<Prepared, Failure> {
    let mut config = ExperimentConfig::load(&common.config).map_err(usage)?;
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate().map_err(usage)?;
    if common.jobs == Some(0) {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    let out = resolve_output_dir(common.out.as_deref(), &config);
    Ok(Prepared { config, out, pool })
}

fn echo_config(p: &Prepared) -> Result<()> {
    write_file(&p.out.join(CONFIG_ECHO_FILE), &p.config.to_toml()?)
}

fn announce(path: &Path) {
    eprintln!("wrote {}", path.display());
}

fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Run(common) => {
            let p = prepare(&common)?;
            let runs = p.pool.install(|| run_all(&p.config))?;
            let metrics = p.out.join(METRICS_FILE);
            write_file(&metrics, &render_metrics(&metrics_rows(&runs), p.config.data.num_groups)?)?;
            announce(&metrics);
            let summary = summarise(&p.config, &runs);
            let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))? + "\n";
            let path = p.out.join(SUMMARY_FILE);
            write_file(&path, &json)?;
            announce(&path);
            echo_config(&p)?;
        }
        Command::Sweep(common) => {
            let p = prepare(&common)?;
            let rows = p.pool.install(|| sweep(&p.config))?;
            let path = p.out.join(SWEEP_FILE);
            write_file(&path, &render_sweep(&rows)?)?;
            announce(&path);
            echo_config(&p)?;
        }
        Command::Attack { kind, common } => {
            let kind: AttackKind = kind.parse().map_err(usage)?;
            let p = prepare(&common)?;
            let rows = p.pool.install(|| attack(&p.config, kind))?;
            let path = p.out.join(ATTACKS_FILE);
            write_attacks(&path, &rows)?;
            announce(&path);
            echo_config(&p)?;
        }
        Command::Report { config, out } => {
            let config = config
                .map(|c| ExperimentConfig::load(&c))
                .transpose()
                .map_err(usage)?;
            let dir = match &config {
                Some(c) => resolve_output_dir(out.as_deref(), c),
                None => out
                    .or_else(|| std::env::var_os(config::OUT_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from("out")),
            };
            let md = render_report(&dir)?;
            let path = dir.join(REPORT_FILE);
            write_file(&path, &md)?;
            announce(&path);
        }
    }
    Ok(())
}
