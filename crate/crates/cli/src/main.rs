//! `natlas`: runs the identification, lens and steering experiments from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "natlas", version, about = "Language-specific neuron identification and steering")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the command's outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// File of `key = value` lines supplying defaults for flags not given.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a model with hand-placed language neurons, plus its registry and corpus.
    Plant(PlantArgs),
    /// Train a tiny model on a synthetic multi-family corpus.
    Train(TrainArgs),
    /// Accumulate activation statistics and select language-specific neurons.
    Identify(IdentifyArgs),
    /// Pairwise overlap of saved neuron sets.
    Overlap(OverlapArgs),
    /// Per-layer language profile through the logit lens.
    Lens(LensArgs),
    /// Force every source language's questions to answer in every target language.
    Force(ForceArgs),
    /// Deactivate languages cumulatively and record where answers fall back to.
    Fallback(FallbackArgs),
    /// Score generations on a task file, optionally under an intervention plan.
    Eval(EvalArgs),
    /// Generate one continuation under an intervention plan.
    SteerGenerate(SteerArgs),
}

#[derive(Args, Debug)]
pub struct ModelDims {
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PlantArgs {
    #[arg(long, default_value_t = 4)]
    pub languages: usize,
    #[arg(long, default_value_t = 10)]
    pub alphabet_size: usize,
    /// Planted neurons per language.
    #[arg(long, default_value_t = 8)]
    pub per_lang: usize,
    /// Layers receiving planted neurons; defaults to the upper half.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,
    #[command(flatten)]
    pub dims: ModelDims,
    #[arg(long, default_value_t = 12)]
    pub docs: usize,
    #[arg(long, default_value_t = 160)]
    pub doc_len: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    pub families: usize,
    #[arg(long, default_value_t = 3)]
    pub per_family: usize,
    #[arg(long, default_value_t = 0.6)]
    pub shared_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub alphabet_size: usize,
    /// Existing registry; with `--corpus`, trains on that data instead of synthesizing it.
    #[arg(long)]
    pub languages: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub max_bytes: Option<usize>,
    #[command(flatten)]
    pub dims: ModelDims,
    #[arg(long, default_value_t = 600)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 40)]
    pub docs: usize,
    #[arg(long, default_value_t = 400)]
    pub doc_len: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum FilterPop {
    Prob,
    Value,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus directory laid out as `<lang-id>/*.txt`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Language registry; defaults to `languages.json` next to the model.
    #[arg(long)]
    pub languages: Option<PathBuf>,
    /// Reuse saved statistics instead of accumulating.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub k: f64,
    #[arg(long, default_value_t = 95.0)]
    pub filter_pct: f64,
    #[arg(long, default_value_t = 95.0)]
    pub threshold_pct: f64,
    #[arg(long, value_enum, default_value = "prob")]
    pub filter_population: FilterPop,
    /// Window length; defaults to the model's maximum sequence length, capped at 128.
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Defaults to the window length.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Per-language byte cap when reading the corpus.
    #[arg(long)]
    pub max_bytes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct OverlapArgs {
    #[arg(long)]
    pub sets: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum LensModeArg {
    Mass,
    Top1,
}

#[derive(Args, Debug)]
pub struct LensArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub languages: Option<PathBuf>,
    /// JSON object mapping language id to prompt list; defaults to generated questions.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Only profile this language's prompts.
    #[arg(long)]
    pub target: Option<String>,
    /// Defaults to the highest-priority language.
    #[arg(long)]
    pub pivot: Option<String>,
    #[arg(long, value_enum, default_value = "mass")]
    pub lens_mode: LensModeArg,
    #[arg(long, default_value_t = 6)]
    pub n_prompts: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StrategyArg {
    Activate,
    DeactAct,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum FamilyArg {
    Additive,
    Replacement,
    Diffmean,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum DenomArg {
    All,
    Active,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum StatArg {
    Mean,
    Median,
}

#[derive(Args, Debug)]
pub struct ForceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub languages: Option<PathBuf>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long, value_enum, default_value = "deact-act")]
    pub strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "additive")]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub deact_value: f32,
    /// Deactivate with `set(0)` rather than `multiply(0)`.
    #[arg(long)]
    pub zero_as_set: bool,
    #[arg(long, value_enum, default_value = "all")]
    pub boost_denominator: DenomArg,
    #[arg(long, value_enum, default_value = "mean")]
    pub replace_statistic: StatArg,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub diffmean_scale: f32,
    /// Apply DiffMean on every layer instead of the layers holding the target's neurons.
    #[arg(long)]
    pub diffmean_all_layers: bool,
    /// JSON object mapping language id to questions; defaults to generated questions.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    pub n_questions: usize,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: usize,
}

#[derive(Args, Debug)]
pub struct FallbackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub languages: Option<PathBuf>,
    #[arg(long)]
    pub sets: PathBuf,
    /// Deactivation order; defaults to priority order without the last language.
    #[arg(long, value_delimiter = ',')]
    pub order: Vec<String>,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub deact_value: f32,
    /// JSON list of prompts; defaults to generated questions.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 70)]
    pub n_prompts: usize,
    /// Language of the generated prompts; defaults to the highest-priority language.
    #[arg(long)]
    pub prompt_language: Option<String>,
    #[arg(long, default_value_t = 64)]
    pub max_tokens: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum MetricArg {
    ExactMatch,
    CharF1,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL file of `{prompt, reference, max_tokens}` objects.
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "exact-match")]
    pub metric: MetricArg,
    /// Defaults to the task file's stem.
    #[arg(long)]
    pub task_id: Option<String>,
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Saved plan; otherwise one is built from `--activate` and `--deactivate`.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub sets: Option<PathBuf>,
    #[arg(long)]
    pub activate: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub deactivate: Vec<String>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub deact_value: f32,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f32,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<natlas_core::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
        if cause.is::<config::ConfigError>() || cause.is::<commands::UsageError>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match config::inject(std::env::args().collect(), &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
