//! `mettle`: data generation, training, evaluation, memory comparison,
//! gradient checks and ablations from a JSON experiment config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mettle_core::Error;

#[derive(Parser)]
#[command(name = "mettle", version, about = "Meta-token learning over frozen transformer features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory; defaults to the config's `output_dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test splits as tensor files with a JSON sidecar.
    GenData(Common),
    /// Train and write the run report and weights.
    Train(Common),
    /// Evaluate saved weights; prints metrics CSV or writes `metrics.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Retained memory, parameters and step time for both topologies.
    Memcmp {
        #[command(flatten)]
        common: Common,
        /// timed iterations per topology
        #[arg(long, default_value_t = 10)]
        reps: usize,
        /// also train both topologies and report their metrics
        #[arg(long)]
        with_metric: bool,
    },
    /// Finite-difference check of every trainable parameter on the first
    /// training clip.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Train one model per grid value along an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// comma-separated settings
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<String>,
    },
    /// Print the experiment config JSON schema.
    Schema {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Tensor(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Numeric(_) | Error::Tensor(_) => "numeric",
        Error::Io(_) => "io",
        Error::Format(_) => "format",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval { common, weights } => commands::eval(&common, &weights),
        Command::Memcmp { common, reps, with_metric } => commands::memcmp(&common, reps, with_metric),
        Command::Gradcheck { common, tolerance } => commands::gradcheck(&common, tolerance),
        Command::Ablate { common, axis, grid } => commands::ablate(&common, &axis, &grid),
        Command::Schema { out } => commands::schema(out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": kind(&e), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
