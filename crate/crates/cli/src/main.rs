//! `hgtpp`: train, evaluate, and probe hyperedge event forecasting models.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O or compatibility, 4 numeric
//! divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Divergence(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "hgtpp",
    about = "Temporal point process forecasting of hyperedge events",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Omitted values fall back to the config
/// file (when given) and then to the published defaults.
#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Model name (RHE, RDHE, DE-drift, DE, DHE-drift, DHE, HGDHE-hist,
    /// HGDHE, BDE, BDHE, HGBDHE)
    #[arg(long)]
    model: Option<String>,
    /// Dataset directory (simplex triple) or bipartite .tsv file
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treat the dataset as bipartite
    #[arg(long)]
    bipartite: bool,
    /// Embedding size [default: 64]
    #[arg(long)]
    d: Option<usize>,
    /// Learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch segment length [default: 128]
    #[arg(long)]
    segment: Option<usize>,
    /// Negative hyperedges per event [default: 20]
    #[arg(long)]
    negatives: Option<usize>,
    /// Monte-Carlo samples for survival terms [default: 20]
    #[arg(long = "mc-samples")]
    mc_samples: Option<usize>,
    /// History window capacity [default: 128]
    #[arg(long)]
    history: Option<usize>,
    /// Global random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation scoring threads [default: 1]
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory [default: $HGTPP_OUT or .]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Disable median-interevent time scaling
    #[arg(long = "no-time-scaling")]
    no_time_scaling: bool,
    /// key=value config file (flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path [default: <out>/model.ckpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a checkpoint plus a loss trace
    Train(CommonArgs),
    /// Score a checkpoint on the test split (MRR, MAE, size buckets)
    Evaluate(CommonArgs),
    /// Emit per-event rank and duration predictions for the test split
    Predict(CommonArgs),
    /// Generate a synthetic corpus from a key=value spec file
    Simulate {
        /// Simulation spec (key=value lines; see README)
        spec: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Report dataset statistics (node counts, events, distinct hyperedges)
    Stats(CommonArgs),
}

fn resolve(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(v) = &args.model {
        cfg.model = Some(v.clone());
    }
    if let Some(v) = &args.data {
        cfg.data = Some(v.clone());
    }
    if args.bipartite {
        cfg.bipartite = true;
    }
    if let Some(v) = args.d {
        cfg.dim = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.segment {
        cfg.segment = v;
    }
    if let Some(v) = args.negatives {
        cfg.negatives = v;
    }
    if let Some(v) = args.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = args.history {
        cfg.history = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.threads {
        cfg.threads = v;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    if args.no_time_scaling {
        cfg.time_scaling = false;
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if cfg.dim == 0 || cfg.segment == 0 {
        return Err(CliError::Usage(
            "--d and --segment must be positive".into(),
        ));
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => commands::cmd_train(&resolve(args)?),
        Command::Evaluate(args) => commands::cmd_evaluate(&resolve(args)?),
        Command::Predict(args) => commands::cmd_predict(&resolve(args)?),
        Command::Simulate { spec, common } => commands::cmd_simulate(spec, &resolve(common)?),
        Command::Stats(args) => commands::cmd_stats(&resolve(args)?),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.code())
        }
    }
}
