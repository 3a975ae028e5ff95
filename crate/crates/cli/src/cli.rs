//! Command-line surface.

use std::path::PathBuf;

use bsm_core::model::Dimension;
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, AuditWorkflow, Outcome, PairSelection};
use crate::config::RunConfig;
use crate::error::{ErrorKind, Stage, StageError, StageExt};
use crate::synth::{self, SynthConfig};
use crate::workspace::Workspace;

#[derive(Debug, Parser)]
#[command(
    name = "bsm",
    version,
    about = "Bias similarity scoring, comparison and audits"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "bsm-out")]
    pub out: PathBuf,
    /// Comma-separated dimensions to keep, e.g. `gender,religion`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub dims: Option<Vec<Dimension>>,
    /// Worker threads for metric jobs (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Seed override for `synth`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-slice scores, histograms, flip tables and open-ended summaries.
    Score,
    /// Pairwise bias signatures and similarity matrices.
    Compare {
        /// `@all` or `MODEL_A,MODEL_B`.
        #[arg(long, default_value = "@all")]
        pair: PairSelection,
    },
    /// Procurement, release-regression or lineage audits.
    Audit {
        #[command(subcommand)]
        workflow: AuditCommand,
    },
    /// Generate a synthetic run directory from a spec.
    Synth {
        /// Synthetic spec (TOML).
        spec: PathBuf,
    },
    /// Parse every configured input and list rejected lines.
    Validate,
}

#[derive(Debug, Subcommand)]
pub enum AuditCommand {
    /// Filter candidates against a policy and rank the survivors.
    Procure {
        /// Policy file; falls back to `audit.policy` in the config.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Compare a new release against an old one under per-metric tolerances.
    Regress {
        #[arg(long)]
        old: Option<String>,
        #[arg(long)]
        new: Option<String>,
        #[arg(long)]
        tolerances: Option<PathBuf>,
    },
    /// Flag model pairs whose signature distance falls below a threshold.
    Lineage {
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn config(global: &GlobalArgs) -> Result<RunConfig, StageError> {
    let path = global.config.as_ref().ok_or_else(|| {
        StageError::config(
            Stage::Config,
            anyhow::anyhow!("--config is required for this command"),
        )
    })?;
    RunConfig::load(path)
}

fn workspace(global: &GlobalArgs) -> Result<Workspace, StageError> {
    Workspace::load(config(global)?, global.dims.clone())
}

/// Executes a parsed command line inside a worker pool of `--jobs` threads.
pub fn run(cli: Cli) -> Result<Outcome, StageError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build()
        .at(Stage::Config, ErrorKind::Config)?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> Result<Outcome, StageError> {
    let g = &cli.global;
    match &cli.command {
        Command::Score => commands::score(&workspace(g)?, &g.out),
        Command::Compare { pair } => commands::compare(&workspace(g)?, pair, &g.out),
        Command::Audit { workflow } => {
            let workflow = match workflow {
                AuditCommand::Procure { policy } => AuditWorkflow::Procure {
                    policy: policy.clone(),
                },
                AuditCommand::Regress {
                    old,
                    new,
                    tolerances,
                } => AuditWorkflow::Regress {
                    old: old.clone(),
                    new: new.clone(),
                    tolerances: tolerances.clone(),
                },
                AuditCommand::Lineage { threshold } => AuditWorkflow::Lineage {
                    threshold: *threshold,
                },
            };
            commands::audit(&workspace(g)?, &workflow, &g.out)
        }
        Command::Synth { spec } => synth::run(&SynthConfig::load(spec)?, g.seed, &g.out),
        Command::Validate => commands::validate(&config(g)?),
    }
}
