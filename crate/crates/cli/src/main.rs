mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use ade_core::evalx::MultiPairRule;
use ade_core::pipeline::MatchSelection;
use clap::error::ErrorKind;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

/// Cascaded adverse drug event extraction: drug lexicon, relevance
/// classifier, span QA.
#[derive(Debug, Parser)]
#[command(name = "ade", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus, print its counts, optionally write a split.
    Ingest(IngestArgs),
    /// Train every stage and write a bundle.
    Train(TrainArgs),
    /// Score a bundle end to end on a labeled test set.
    Eval(EvalArgs),
    /// Run one sentence through the cascade.
    Predict(PredictArgs),
}

/// `N,M`: positive and negative sentence counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub pos: usize,
    pub neg: usize,
}

fn parse_counts(s: &str) -> Result<Counts, String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected N,M, got {s:?}"))?;
    let num = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok(Counts {
        pos: num(a)?,
        neg: num(b)?,
    })
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["pos", "synthetic"])))]
pub struct DataArgs {
    /// Positive records, `id|sentence|ae|b|e|drug|b|e` per line.
    #[arg(long, requires = "neg")]
    pub pos: Option<PathBuf>,
    /// Negative records, `id NEG sentence` per line.
    #[arg(long, requires = "pos")]
    pub neg: Option<PathBuf>,
    /// Generate a synthetic corpus with N positives and M negatives.
    #[arg(long, value_name = "N,M", value_parser = parse_counts, conflicts_with_all = ["pos", "neg"])]
    pub synthetic: Option<Counts>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Write train.pos, train.neg, test.pos, test.neg here.
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchArg {
    Exact,
    Overlap,
    Both,
}

impl From<MatchArg> for MatchSelection {
    fn from(m: MatchArg) -> Self {
        match m {
            MatchArg::Exact => MatchSelection::Exact,
            MatchArg::Overlap => MatchSelection::Overlap,
            MatchArg::Both => MatchSelection::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Any,
    All,
}

impl From<RuleArg> for MultiPairRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Any => MultiPairRule::Any,
            RuleArg::All => MultiPairRule::All,
        }
    }
}

/// Overrides for individual configuration fields.
#[derive(Debug, Default, Args)]
pub struct ConfigFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classifier_k: Option<usize>,
    #[arg(long)]
    pub qa_k: Option<usize>,
    /// Relevance probability needed to reach QA.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_answer_len: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub relevance_epochs: Option<usize>,
    #[arg(long)]
    pub relevance_lr: Option<f64>,
    #[arg(long)]
    pub relevance_dim: Option<usize>,
    #[arg(long)]
    pub relevance_hidden: Option<usize>,
    #[arg(long)]
    pub relevance_batch_size: Option<usize>,
    #[arg(long)]
    pub qa_epochs: Option<usize>,
    #[arg(long)]
    pub qa_lr: Option<f64>,
    #[arg(long)]
    pub qa_dim: Option<usize>,
    #[arg(long)]
    pub qa_batch_size: Option<usize>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    #[arg(long = "match", value_enum)]
    pub match_selection: Option<MatchArg>,
    #[arg(long, value_enum)]
    pub multi_pair: Option<RuleArg>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Bundle output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Base hyperparameters before --config and flags apply.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// JSON file with any subset of the configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-epoch training losses; defaults to `<out>.losses.tsv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Seed for a synthetic test set.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "match", value_enum)]
    pub match_selection: Option<MatchArg>,
    #[arg(long, value_enum)]
    pub multi_pair: Option<RuleArg>,
    /// Report JSON output path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include per-sentence traces in the report.
    #[arg(long)]
    pub traces: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub text: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
