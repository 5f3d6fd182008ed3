use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Slot-format constrained generation: masks, decoding, losses and scoring.
#[derive(Debug, Parser)]
#[command(name = "slotforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the canonical format, its slot table and the mask matrix.
    CompileFormat(CompileArgs),
    /// Count format errors of predictions.
    Validate(ScoreArgs),
    /// Score predictions against gold targets.
    Score(ScoreArgs),
    /// Train the toy model and write it with per-epoch metrics.
    TrainToy(TrainArgs),
    /// Greedy-decode a dataset with a trained toy model.
    Decode(DecodeArgs),
    /// Write a synthetic dataset.
    GenSynthetic(GenArgs),
    /// Run the {CE, CE+FL} x {plain, formatted} grid over several seeds.
    RunAblation(AblationArgs),
}

/// How the output format is chosen. Without either flag, each example uses
/// the builtin format of its `task` field.
#[derive(Debug, Args)]
struct FormatArgs {
    /// Format string, e.g. "<SOURCE> <;> instance of <;> tagset </>".
    #[arg(long, conflicts_with = "task")]
    format: Option<String>,
    /// Builtin task format (NER, RE, SRL, ID, DST).
    #[arg(long)]
    task: Option<String>,
    /// Tag list, one per line, bound to the tagset slot.
    #[arg(long)]
    tags: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompileArgs {
    #[command(flatten)]
    format: FormatArgs,
    /// Vocabulary file, one token per line.
    #[arg(long, required_unless_present = "render_only")]
    vocab: Option<PathBuf>,
    /// Source sentence the <SOURCE> slots are restricted to.
    #[arg(long, required_unless_present = "render_only")]
    source: Option<String>,
    /// Only print the canonical format string.
    #[arg(long)]
    render_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    F1,
    Joint,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    format: FormatArgs,
    /// Predictions: JSONL of {"id", "output"}.
    #[arg(long)]
    preds: PathBuf,
    /// Gold data: JSONL examples.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Metric::F1)]
    metric: Metric,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print a human-readable summary to stderr.
    #[arg(long)]
    pretty: bool,
}

#[derive(Debug, Args)]
struct WeightArgs {
    #[arg(long, default_value_t = 0.5)]
    w_ce: f64,
    #[arg(long, default_value_t = 0.2)]
    w_st: f64,
    #[arg(long, default_value_t = 0.3)]
    w_sl: f64,
    #[arg(long, default_value_t = 0.33)]
    w_miss: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    format: FormatArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    data: PathBuf,
    /// Extra JSONL datasets whose words join the vocabulary (e.g. a test set).
    #[arg(long)]
    vocab_data: Vec<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary file to write [default: <out>.vocab].
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    /// Per-epoch metrics CSV [default: <out>.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    /// Standard deviation of the initial parameters; 0 starts from zeros.
    #[arg(long, default_value_t = 0.0)]
    init_scale: f64,
    #[arg(long, env = "SLOTFORGE_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[command(flatten)]
    format: FormatArgs,
    #[arg(long)]
    model: PathBuf,
    /// Vocabulary written by train-toy [default: <model>.vocab].
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Predictions JSONL to write.
    #[arg(long)]
    out: PathBuf,
    /// Constrain decoding with the format masks.
    #[arg(long)]
    formatted: bool,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Shape {
    Ner,
    Re,
    Id,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = Shape::Ner)]
    shape: Shape,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 60)]
    vocab_size: usize,
    #[arg(long, default_value_t = 12)]
    max_source_len: usize,
    #[arg(long, default_value_t = 3)]
    n_tags: usize,
    #[arg(long, env = "SLOTFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblationArgs {
    #[arg(long, value_enum, default_value_t = Shape::Ner)]
    shape: Shape,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, env = "SLOTFORGE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    init_scale: f64,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[command(flatten)]
    weights: WeightArgs,
    /// JSON report; the summary table goes to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the table instead of the JSON summary.
    #[arg(long)]
    pretty: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::CompileFormat(a) => commands::compile_format(a),
        Command::Validate(a) => commands::score(a, true),
        Command::Score(a) => commands::score(a, false),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Decode(a) => commands::decode(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::RunAblation(a) => commands::run_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}
