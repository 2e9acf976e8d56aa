mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Streaming video memory engine: simulate, ingest, query, benchmark.
#[derive(Debug, Parser)]
#[command(name = "vstream", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Memory config as TOML; missing keys take the full-size defaults.
    #[arg(long, global = true, value_name = "PATH", conflicts_with = "paper_shapes")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Stream length; `bench` accepts a comma-separated list.
    #[arg(long, global = true, value_name = "N[,N...]")]
    pub steps: Option<String>,
    /// Full-size grids (16×16 low, 32×32 high) instead of the 4×4 / 8×8 desk shapes.
    #[arg(long, global = true)]
    pub paper_shapes: bool,
    /// Clustering policy: k-means, dbscan, gmm, neighbor-merge, neighbor-drop, uniform-sample.
    #[arg(long, global = true, value_name = "NAME")]
    pub policy: Option<String>,
    /// High-res frames kept in memory before spilling to disk.
    #[arg(long, global = true, value_name = "N")]
    pub watermark: Option<usize>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Output format; JSON unless given.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Synthetic stream spec as TOML; shapes are taken from the memory config.
    #[arg(long, global = true, value_name = "PATH")]
    pub stream: Option<PathBuf>,
    /// Number of scenes in the synthetic stream.
    #[arg(long, global = true, value_name = "N")]
    pub scenes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs a synthetic stream through the engine and reports the final memory.
    Simulate(commands::SimulateArgs),
    /// Runs precomputed FVSB features through the engine.
    Ingest(commands::IngestArgs),
    /// Queries the memory at chosen frame counts, or inspects an exported snapshot.
    Query(commands::QueryArgs),
    /// Query latency against stream length.
    Bench(commands::BenchArgs),
    /// Policy and capacity ablation table.
    Ablate(commands::AblateArgs),
    /// Raw memory-item and frame vectors as CSV for external PCA.
    ExportPca,
}

/// How a command ended when it did not fail outright.
pub enum Outcome {
    Passed,
    ChecksFailed(Vec<String>),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Engine(#[from] vstream_core::Error),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VSTREAM_LOG", "warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let ctx = commands::Context::new(cli.common, argv);
    let result = match cli.command {
        Command::Simulate(a) => ctx.and_then(|c| commands::simulate(&c, &a)),
        Command::Ingest(a) => ctx.and_then(|c| commands::ingest(&c, &a)),
        Command::Query(a) => ctx.and_then(|c| commands::query(&c, &a)),
        Command::Bench(a) => ctx.and_then(|c| commands::bench(&c, &a)),
        Command::Ablate(a) => ctx.and_then(|c| commands::ablate(&c, &a)),
        Command::ExportPca => ctx.and_then(|c| commands::export_pca(&c)),
    };
    match result {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed(failures)) => {
            for f in failures {
                eprintln!("self-check failed: {f}");
            }
            ExitCode::from(1)
        }
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
