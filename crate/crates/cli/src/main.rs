//! `textclust`: zero-shot text clustering from the command line.

mod commands;
mod config;
mod error;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textclust_core::pipeline::Mode;
use textclust_core::{PromptOrder, TaskType};

use crate::config::BackendKind;

#[derive(Parser, Debug)]
#[command(name = "textclust", version, about = "Zero-shot text clustering with LLM-generated class labels")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML file with [backend], [run] and [paths] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// JSON or TOML rules for the mock backend.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub max_parallel: Option<usize>,
    /// Response cache directory (default: <out-dir>/cache).
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Prompt template overrides (TOML).
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    /// Log progress to stderr; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Corpus file (.jsonl or .csv).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task_type: Option<TaskType>,
    /// Number of clusters (default: the corpus class count).
    #[arg(long)]
    pub k: Option<usize>,
    /// Final prompt layout: ct (classes first) or tc (text first).
    #[arg(long, value_parser = parse_order)]
    pub order: Option<PromptOrder>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Fraction of the corpus used for label generation.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Aggregate only the n most frequent predictions.
    #[arg(long)]
    pub max_subsets: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a corpus and write it as canonical JSONL with a manifest.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_parser = parse_task)]
        task_type: Option<TaskType>,
        /// Also write front/back halves after dropping the n smallest classes.
        #[arg(long)]
        split_drop: Option<usize>,
    },
    /// Stage 1: open-ended predictions and their histogram.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Histogram rows to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Stage 2: aggregate the histogram into k class labels.
    Aggregate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Stage 3: classify every text against the class labels.
    Predict {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score the final predictions and print the accuracy row.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// All stages, repeated --runs times.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Macro and micro accuracy over several run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<TaskType, String> {
    s.parse().map_err(|e: <TaskType as std::str::FromStr>::Err| e.to_string())
}

fn parse_order(s: &str) -> Result<PromptOrder, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
