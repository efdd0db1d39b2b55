//! Command-line driver: one subcommand per pipeline stage, each writing a
//! stage directory with a manifest under the output root.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod members;
pub mod subgroup;
pub mod trainers;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use prognos_core::domain::Endpoint;

use crate::artifacts::Context;
use crate::config::{resolve_paths, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "prognos", version, about = "Survival-risk modeling pipeline")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config endpoint (os, dfi, drfi, rfs, drfs).
    #[arg(long, global = true)]
    pub endpoint: Option<Endpoint>,
    /// Restricts evaluation to a subgroup, e.g. `er = positive AND age >= 50`.
    #[arg(long, global = true)]
    pub subgroup: Option<String>,
    /// Output root, overriding `paths.output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite stage directories produced under a different config.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads (0 = all cores), overriding the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate synthetic cohorts and embeddings with planted risk.
    Synth,
    /// Validate cohorts and embeddings; write the canonical cohort.
    Ingest,
    /// Segment slide images and lay out patch grids.
    Tile,
    /// Hyperparameter search for the pathology models.
    TrainPathology,
    /// Hyperparameter search for the clinical AFT models.
    TrainClinical,
    /// Select the top-K members of each modality.
    BuildEnsemble,
    /// Score subjects and compute per-dataset metrics.
    Evaluate,
    /// Fix the risk cutoff and report high/low hazard ratios.
    Stratify,
    /// Random-effects pooling across test datasets.
    Pool,
    /// Kaplan-Meier curves, quartile tables and multivariate models.
    Report,
    /// Every stage from ingest to report (synth first when configured).
    Pipeline,
}

impl Cli {
    pub fn context(&self) -> Result<Context> {
        let (mut cfg, dir) = match &self.config {
            Some(p) => {
                let dir = p.parent().map(PathBuf::from).filter(|d| !d.as_os_str().is_empty()).unwrap_or_else(|| ".".into());
                (RunConfig::load(p)?, dir)
            }
            None => (RunConfig::default(), PathBuf::from(".")),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.endpoint {
            cfg.endpoint = e;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        let paths = resolve_paths(&cfg, &dir, self.out.as_deref());
        Context::new(cfg, paths, self.subgroup.clone(), self.force)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = cli.context()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.cfg.workers)
        .build()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    use commands::{analysis, evaluate, prepare, train};
    pool.install(|| match cli.command {
        Command::Synth => prepare::synth(&ctx),
        Command::Ingest => prepare::ingest(&ctx),
        Command::Tile => prepare::tile(&ctx),
        Command::TrainPathology => train::train_pathology(&ctx),
        Command::TrainClinical => train::train_clinical(&ctx),
        Command::BuildEnsemble => evaluate::build_ensemble(&ctx),
        Command::Evaluate => evaluate::evaluate(&ctx),
        Command::Stratify => analysis::stratify(&ctx),
        Command::Pool => analysis::pool(&ctx),
        Command::Report => analysis::report(&ctx),
        Command::Pipeline => commands::pipeline(&ctx),
    })
}

/// Parses arguments and runs; returns the process exit code
/// (0 ok, 2 validation, 3 numerical, 4 missing artifact).
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
