mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Multichannel source separation with local Gaussian models.
#[derive(Parser, Debug)]
#[command(name = "lgmsep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the conditional VAE source model on labelled WAVs.
    Train(Common),
    /// Simulate mixtures with ground-truth source images.
    Mix(Common),
    /// Separate mixtures with mnmf1, mnmf2, ilrma or gmvae.
    Separate(Common),
    /// Score separated images against references.
    Eval(Common),
}

/// Flags shared by every command; each overrides its config key.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Separation method, or the report label for `eval`.
    #[arg(long)]
    pub method: Option<String>,
    /// Solver iterations, or training epochs for `train`.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] lgmsep_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use lgmsep_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(E::Io { .. } | E::Parse { .. }) => 4,
            CliError::Core(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&Common) -> Result<(), CliError>) = match &cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Mix(c) => (c, commands::mix),
        Command::Separate(c) => (c, commands::separate),
        Command::Eval(c) => (c, commands::eval),
    };
    if let Some(n) = common.workers {
        if n == 0 {
            eprintln!("lgmsep: config error: --workers must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("global thread pool is built once");
    }
    match run(common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lgmsep: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
