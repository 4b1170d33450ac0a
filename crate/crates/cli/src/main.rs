//! `atcl` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use atcl::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit status:
  0  success
  2  bad command line
  3  invalid configuration or override
  4  file missing or unreadable/unwritable
  5  malformed input file
  6  input rejected by an operation
  7  non-finite loss, training aborted
  8  internal error

Errors are printed to stderr as one line: `error[<kind>]: <message>`.";

#[derive(Parser)]
#[command(name = "atcl", version, about = "Adversarial training with contrastive learning", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, vocabulary and metrics.jsonl.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a text corpus.
    EvalPpl(EvalPplArgs),
    /// Corpus BLEU of hypothesis lines against reference lines.
    EvalBleu(EvalBleuArgs),
    /// Greedy translation of each input line.
    Translate(TranslateArgs),
    /// Nearest tokens to a word in embedding space.
    ProbeNeighbors(NeighborsArgs),
    /// Perturb one word of a sentence and compare greedy completions.
    Attack(AttackArgs),
    /// Mean KL divergence between clean and perturbed next-token distributions.
    Robustness(RobustnessArgs),
    /// Learn byte-pair merges from a corpus.
    BpeTrain(BpeTrainArgs),
    /// Build a vocabulary file from a corpus.
    VocabBuild(VocabBuildArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (same as `--set output_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run saved in this directory from its last checkpoint.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed", "out"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Merge table; defaults to merges.txt next to the checkpoint if present.
    #[arg(long)]
    merges: Option<PathBuf>,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Json,
}

#[derive(Args)]
struct EvalPplArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 32)]
    seq_len: usize,
    #[arg(long, default_value_t = 45)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalBleuArgs {
    #[arg(long)]
    hypotheses: PathBuf,
    #[arg(long)]
    references: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 45)]
    batch_size: usize,
}

#[derive(Args)]
struct NeighborsArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    word: String,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    sentence: String,
    /// Token index of the target word; defaults to the last perturbable word.
    #[arg(long)]
    position: Option<usize>,
    #[arg(long, default_value_t = 0.03)]
    epsilon: f64,
    #[arg(long, default_value = "paper-minus")]
    sign: String,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value = "paper-minus")]
    sign: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct BpeTrainArgs {
    /// Corpus files; repeatable.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct VocabBuildArgs {
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    /// Segment the corpus with this merge table first.
    #[arg(long)]
    merges: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_frequency: u64,
    #[arg(long)]
    output: PathBuf,
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (3, "config"),
        Error::Io { .. } => (4, "io"),
        Error::Format { .. } => (5, "format"),
        Error::InvalidInput(_) => (6, "input"),
        Error::NonFinite(_) => (7, "non-finite"),
        Error::Internal(_) => (8, "internal"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::EvalPpl(a) => commands::eval_ppl(a),
        Command::EvalBleu(a) => commands::eval_bleu(a),
        Command::Translate(a) => commands::translate(a),
        Command::ProbeNeighbors(a) => commands::probe_neighbors(a),
        Command::Attack(a) => commands::attack(a),
        Command::Robustness(a) => commands::robustness(a),
        Command::BpeTrain(a) => commands::bpe_train(a),
        Command::VocabBuild(a) => commands::vocab_build(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("error[{kind}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
