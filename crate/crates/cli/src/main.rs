mod backend;
mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "stepsearch", version, about = "Step-level tree search and preference-pair tooling")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Flat TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Standard,
    Reflection,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the tree search for every problem and write one dump per tree.
    Search {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip problems whose dump already exists.
        #[arg(long)]
        resume: bool,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long, default_value_t = 0)]
        round: usize,
    },
    /// Sample chosen/rejected pairs from tree dumps.
    Sample {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build reflection pairs from tree dumps.
    Porp {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-pair losses from scorer log-probabilities.
    Score {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the most visited path of each tree as a prediction.
    Predict {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a trajectory corpus into the two warmup stages.
    WarmupSplit {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for stage1.txt and stage2.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Answer accuracy of one or more prediction files.
    Eval {
        #[arg(long)]
        problems: PathBuf,
        #[arg(long, required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summaries of tree dumps and, optionally, pair files.
    Stats {
        #[arg(long)]
        trees: PathBuf,
        #[arg(long)]
        pairs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check files against their formats.
    Validate {
        #[arg(long)]
        kind: String,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Per-run outcome: `Ok(n)` with `n` item-level failures.
pub type Outcome = anyhow::Result<usize>;

fn run(cli: Cli) -> Outcome {
    let g = &cli.global;
    match cli.command {
        Command::Search { problems, out, resume, preset, round } => {
            commands::search(g, &problems, &out, resume, preset, round)
        }
        Command::Sample { trees, out } => commands::sample(g, &trees, &out),
        Command::Porp { trees, out } => commands::porp(g, &trees, &out),
        Command::Score { problems, pairs, out } => commands::score(g, &problems, &pairs, &out),
        Command::Predict { trees, out } => commands::predict(&trees, &out),
        Command::WarmupSplit { corpus, out } => commands::warmup_split(&corpus, &out),
        Command::Eval { problems, predictions, out } => commands::eval(g, &problems, &predictions, out.as_deref()),
        Command::Stats { trees, pairs, out } => commands::stats(&trees, &pairs, out.as_deref()),
        Command::Validate { kind, files } => commands::validate(&kind, &files),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("completed with {n} failed item(s)");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
