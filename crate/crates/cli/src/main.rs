//! `dlm`: corpus generation, training, distillation, on-policy tuning,
//! sampling, benchmarks and evaluation from one binary.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for errors
//! raised while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(dlm_core::Error),
}

impl From<dlm_core::Error> for CliError {
    fn from(e: dlm_core::Error) -> Self {
        match e {
            dlm_core::Error::InvalidConfig(m) => CliError::Usage(format!("invalid configuration: {m}")),
            e => CliError::Runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dlm", version, about = "Discrete diffusion language model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic program corpus.
    GenCorpus(GenCorpusArgs),
    /// Two-stage curriculum training from scratch (or a resumed checkpoint).
    Train(TrainArgs),
    /// Build a trajectory pool and fine-tune on it.
    Distill(DistillArgs),
    /// On-policy step reduction.
    TrainOnpolicy(OnPolicyArgs),
    /// Sample one completion.
    Sample(SampleArgs),
    /// Block-size sweep and on-policy curve.
    Bench(BenchArgs),
    /// Verifier pass rate on held-out prompts.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub depth: Option<u32>,
    /// Output corpus file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus file; generated from the config when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub mask_only_fraction: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub keep_top: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct OnPolicyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DecodeFlags {
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub steps_per_block: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prompt text, e.g. `x = 12 ;`.
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub decode: DecodeFlags,
    /// Resample low-confidence committed tokens.
    #[arg(long)]
    pub revise: bool,
    /// Print every state of the trajectory, masks as `_`.
    #[arg(long)]
    pub trace: bool,
    /// Directory for the resolved config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    /// Needed for the block sweep.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prompt file for the sweep; held-out prompts are generated when omitted.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Comma-separated block sizes, starting at 1.
    #[arg(long, value_delimiter = ',')]
    pub sweep_blocks: Option<Vec<usize>>,
    /// On-policy log to render as a curve.
    #[arg(long)]
    pub onpolicy_log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out prompt file; generated from the config when omitted.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Train(a) => commands::train(a),
        Command::Distill(a) => commands::distill(a),
        Command::TrainOnpolicy(a) => commands::train_onpolicy(a),
        Command::Sample(a) => commands::sample(a),
        Command::Bench(a) => commands::bench(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
