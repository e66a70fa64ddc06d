use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod exit;

use exit::exit_code;

/// Open-world compositional zero-shot recognition: synthetic data,
/// primitive classifiers, feasibility masks and the bias-sweep evaluation.
#[derive(Debug, Parser)]
#[command(name = "sasow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train the state and object classifiers.
    Train(TrainArgs),
    /// Evaluate trained classifiers with the open-world bias sweep.
    Eval(EvalArgs),
    /// Build a feasibility mask from primitive embeddings.
    Feasibility(FeasibilityArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub states: usize,
    #[arg(long)]
    pub objects: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub images_per_comp: usize,
    /// Fraction of all state-object pairs that get training images.
    #[arg(long)]
    pub seen_frac: f64,
    /// Gaussian noise on the object half (and the state half unless
    /// `--state-noise` is given).
    #[arg(long)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub state_noise: Option<f64>,
    /// Fraction of seen compositions that also get test images.
    #[arg(long)]
    pub seen_test_frac: Option<f64>,
    /// Share of a seen composition's images used for training.
    #[arg(long)]
    pub train_share: Option<f64>,
    /// Chunk count for `--moving`.
    #[arg(long, default_value_t = sasow_core::classifiers::DEFAULT_PATCH_COUNT)]
    pub patches: usize,
    /// Perturb training features by shuffling chunks, optionally with an offset.
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "permute+offset")]
    pub moving: Option<String>,
    /// Keep only this many training compositions.
    #[arg(long)]
    pub reduce_comps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassifierChoice {
    Mlp,
    Attention,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoints go to `<out>/<classifier>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's classifier.
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantChoice {
    KgSp,
    KgSa,
    KgSow,
    Sasow,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Report file; a directory when `--variant all`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, conflicts_with_all = ["embeddings", "no_mask"])]
    pub mask: Option<PathBuf>,
    #[arg(long, requires = "tau", conflicts_with = "no_mask")]
    pub embeddings: Option<PathBuf>,
    /// Threshold in [-1, 1], or `auto`.
    #[arg(long, requires = "embeddings")]
    pub tau: Option<String>,
    /// Treat every composition as feasible (the default without a mask).
    #[arg(long)]
    pub no_mask: bool,
    /// Weight state probabilities by the accuracy ratio.
    #[arg(long, conflicts_with = "variant")]
    pub weighted: bool,
    #[arg(long, default_value_t = sasow_core::evaluation::DEFAULT_BIAS_POINTS)]
    pub bias_points: usize,
    #[arg(long, value_enum)]
    pub variant: Option<VariantChoice>,
    /// Write the bias curve as CSV (single variant only).
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeasibilityArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Threshold in [-1, 1], or `auto`.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Feasibility(a) => commands::feasibility(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
