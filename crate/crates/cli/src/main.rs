//! `hpft` command-line entry point.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 output
//! conflict, 4 missing input, 5 numerical divergence.

mod commands;
mod config;
mod store;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output conflict: {0}")]
    Conflict(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Conflict(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }

    pub fn io(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(e.to_string())
        } else {
            CliError::Other(e.to_string())
        }
    }
}

impl From<hpft::Error> for CliError {
    fn from(e: hpft::Error) -> Self {
        use hpft::Error as E;
        match e {
            E::Config(_) | E::Parse(_) | E::Json(_) | E::InvalidSplit { .. } | E::ArchitectureMismatch(_) | E::ProbeMismatch => {
                CliError::Config(e.to_string())
            }
            E::Missing(_) => CliError::Missing(e.to_string()),
            E::Io(io) => CliError::io(io),
            E::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hpft", version, about = "Head probing / fine-tuning feature-adaptation lab")]
struct Cli {
    /// JSON config for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "HPFT_OUT", default_value = "hpft-out")]
    out: PathBuf,
    /// Replace an existing output directory from a previous run.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: number of cores).
    #[arg(long, global = true, env = "HPFT_THREADS")]
    threads: Option<usize>,
    /// Overrides the config seed (multi-seed configs restart their list here).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write pretraining, downstream and regression datasets.
    GenData,
    /// Train a backbone to the accuracy threshold.
    Pretrain,
    /// One HP-FT run with AIE, adaptation and bound analysis.
    Run,
    /// τ sweep over seeds with τ* selection.
    Sweep,
    /// Recompute a run's analysis from its saved checkpoints.
    Analyze,
    /// Head-exchange matrices over a τ bundle.
    Exchange,
    /// Closed-form trend battery on two-layer linear instances.
    Trend,
    /// Protocol study (lsHP, head capacity, partial backbone, AIE bound, NTK).
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hpft: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    let cfg = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    store::preflight(&cli.out, cli.force)?;
    let ctx = commands::Ctx {
        config_path: cfg,
        out: &cli.out,
        force: cli.force,
        seed: cli.seed,
    };
    match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::Run => commands::run(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Analyze => commands::analyze(&ctx),
        Command::Exchange => commands::exchange(&ctx),
        Command::Trend => commands::trend(&ctx),
        Command::Report => commands::report(&ctx),
    }
}
