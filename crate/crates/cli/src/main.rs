//! `sprc`: synthesize a dataset, train, evaluate and sweep.
//!
//! Exit codes: 0 success, 1 I/O or unreadable input, 2 configuration or usage
//! error, 3 numeric abort during training, 4 at least one sweep cell failed.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sprc_core::dataset::EditKind;
use sprc_core::prompting::{Mechanism, PromptMode};
use sprc_core::training::Precision;

#[derive(Parser, Debug)]
#[command(name = "sprc", version = env!("SPRC_VERSION"), about = "Sentence-level prompt composed image retrieval on a synthetic edit task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML config file (synthetic spec for `synth`, training config otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Floating point precision (overrides the config).
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, triplet manifest and vocabulary.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and metrics log.
    Train(TrainArgs),
    /// Rank queries with a checkpoint and report recall.
    Eval(EvalArgs),
    /// Train and evaluate one run per (value, seed).
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub n_triplets: Option<usize>,
    /// Keep only these edit kinds in the manifest, e.g. `remove,modify`.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<EditKind>>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from this checkpoint (its config is used).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation; the schedule still spans `steps`.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Full-corpus cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 10, 50])]
    pub ks: Vec<usize>,
    /// Subset cut-offs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 3])]
    pub subset_ks: Vec<usize>,
    /// Query mechanism (defaults to the trained one).
    #[arg(long, value_parser = parse_mechanism)]
    pub mechanism: Option<Mechanism>,
    #[arg(long, value_parser = parse_mode)]
    pub prompt_mode: Option<PromptMode>,
    /// Which triplets to rank.
    #[arg(long, value_enum, default_value_t = commands::Split::Heldout)]
    pub split: commands::Split,
    /// Second-stage scorer.
    #[arg(long, value_enum)]
    pub rerank: Option<commands::Rerank>,
    #[arg(long, default_value_t = 10)]
    pub top_m: usize,
    /// Rank the reference image too.
    #[arg(long)]
    pub keep_reference: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// `gamma`, `prompt_length`, `mechanism` or `prompt_mode`.
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    pub seeds: Vec<u64>,
    /// Fixed dataset directory. Without it the synthetic task is regenerated per seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic spec (TOML) used when `--data` is absent.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Restrict regenerated tasks to these edit kinds.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<EditKind>>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: sprc_core::Error| e.to_string())
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    s.parse().map_err(|e: sprc_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse().map_err(|e: sprc_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<EditKind, String> {
    EditKind::ALL
        .into_iter()
        .find(|k| k.token().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown edit kind {s:?}; valid values: add, remove, modify"))
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(&a, &argv),
        Command::Train(a) => commands::train(&a, &argv),
        Command::Eval(a) => commands::eval(&a, &argv),
        Command::Sweep(a) => commands::sweep(&a, &argv),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
