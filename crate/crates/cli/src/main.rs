use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mixtok::dataset::{self, analyze_example, BuildOptions, Corruption};
use mixtok::mmlm::{parse_probs, IGNORE_LABEL};
use mixtok::textnorm::{normalize, read_corpus_lines};
use mixtok::tokenizer::{encode, Mode};
use mixtok::trainer::{train_char_vocab, train_with_progress, TrainEvent};
use mixtok::vocab::{PAD_ID, SEP_ID};
use mixtok::{MaskingConfig, Task, TrainerConfig, Vocabulary};

type CmdResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(
    name = "mixtok",
    version,
    about = "Mixed character/word tokenizer and masked-LM data pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a vocabulary TSV from a text corpus.
    TrainVocab(TrainVocabArgs),
    /// Tokenize stdin line by line.
    Tokenize(TokenizeArgs),
    /// Generate masked training examples into JSONL shards.
    BuildDataset(BuildDatasetArgs),
    /// Print masking statistics of a dataset as JSON.
    Stats(StatsArgs),
    /// Pretty-print the first examples of a dataset.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Granularity {
    Char,
    Mixed,
}

impl Granularity {
    fn name(self) -> &'static str {
        match self {
            Granularity::Char => "char",
            Granularity::Mixed => "mixed",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Mlm,
    Mmlm,
}

#[derive(Args)]
struct TrainVocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 40_000)]
    vocab_size: usize,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    char_coverage: f64,
    #[arg(long, default_value_t = 8)]
    max_piece_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Granularity::Mixed)]
    vocab_granularity: Granularity,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = Granularity::Mixed)]
    mode: Granularity,
    /// Print piece ids.
    #[arg(long, conflicts_with = "pieces")]
    ids: bool,
    /// Print piece surfaces (default).
    #[arg(long)]
    pieces: bool,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    max_len: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 0.20)]
    cmlm_rate: f64,
    #[arg(long, default_value = "0.4,0.3,0.2,0.1")]
    ngram_probs: String,
    #[arg(long, default_value = "0.8,0.1,0.1")]
    action_probs: String,
    #[arg(long, value_enum, default_value_t = TaskArg::Mmlm)]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 10_000)]
    shard_size: usize,
    /// Granularity of the vocabulary; inferred from its pieces when omitted.
    #[arg(long, value_enum)]
    vocab_granularity: Option<Granularity>,
    /// Input granularity of the downstream model, recorded in the manifest.
    #[arg(long, value_enum, default_value_t = Granularity::Mixed)]
    input_granularity: Granularity,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Defaults to the vocabulary recorded in the dataset manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Defaults to the vocabulary recorded in the dataset manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainVocab(a) => train_vocab(a),
        Command::Tokenize(a) => tokenize(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::Stats(a) => stats(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn train_vocab(a: TrainVocabArgs) -> CmdResult {
    let corpus = read_corpus_lines(&a.input)?;
    let vocab = match a.vocab_granularity {
        Granularity::Char => train_char_vocab(&corpus, a.vocab_size, a.char_coverage)?,
        Granularity::Mixed => {
            let cfg = TrainerConfig {
                char_coverage: a.char_coverage,
                max_piece_len: a.max_piece_len,
                seed: a.seed,
                ..TrainerConfig::with_target(a.vocab_size)
            };
            train_with_progress(&corpus, &cfg, |ev| match ev {
                TrainEvent::Seeded { candidates } => eprintln!("seeded {candidates} candidates"),
                TrainEvent::EmStep {
                    candidates,
                    log_likelihood,
                } => eprintln!("em: {candidates} candidates, log-likelihood {log_likelihood:.4}"),
                TrainEvent::Pruned { candidates } => eprintln!("pruned to {candidates} candidates"),
            })?
        }
    };
    vocab.save(&a.model_out)?;
    eprintln!(
        "wrote {} pieces ({} words) to {}",
        vocab.len(),
        vocab.word_count(),
        a.model_out.display()
    );
    Ok(())
}

fn tokenize(a: TokenizeArgs) -> CmdResult {
    let vocab = Vocabulary::load(&a.vocab)?;
    let mode = match a.mode {
        Granularity::Char => Mode::CharOnly,
        Granularity::Mixed => Mode::Mixed,
    };
    let stdin = std::io::stdin().lock();
    let mut out = BufWriter::new(std::io::stdout().lock());
    for (i, line) in stdin.split(b'\n').enumerate() {
        let mut bytes = line?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        let text = normalize(&bytes).map_err(|_| format!("stdin line {}: invalid UTF-8", i + 1))?;
        let seq = encode(&text, &vocab, mode);
        let mut first = true;
        for &id in &seq.ids {
            if !first {
                out.write_all(b" ")?;
            }
            first = false;
            if a.ids {
                write!(out, "{id}")?;
            } else {
                out.write_all(vocab.piece(id).expect("encoded id").surface.as_bytes())?;
            }
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn build_dataset(a: BuildDatasetArgs) -> CmdResult {
    let vocab = Vocabulary::load(&a.vocab)?;
    let task = match a.task {
        TaskArg::Mlm => Task::Mlm,
        TaskArg::Mmlm => Task::Mmlm,
    };
    let vocab_granularity = match a.vocab_granularity {
        Some(g) => g,
        None if vocab.word_count() == 0 => Granularity::Char,
        None => Granularity::Mixed,
    };
    if task == Task::Mmlm && vocab_granularity == Granularity::Char {
        return Err(format!(
            "--task mmlm needs a mixed vocabulary: {} has no multi-character words to expand \
             (use --task mlm with a character vocabulary)",
            a.vocab.display()
        )
        .into());
    }
    if vocab_granularity == Granularity::Mixed && vocab.word_count() == 0 {
        return Err(format!(
            "--vocab-granularity mixed, but {} contains no word pieces",
            a.vocab.display()
        )
        .into());
    }
    if vocab_granularity == Granularity::Char && vocab.word_count() > 0 {
        return Err(format!(
            "--vocab-granularity char, but {} contains {} word pieces",
            a.vocab.display(),
            vocab.word_count()
        )
        .into());
    }
    if a.workers == 0 {
        return Err("--workers must be at least 1".into());
    }
    let cfg = MaskingConfig {
        mask_rate: a.mask_rate,
        action_probs: parse_probs("--action-probs", &a.action_probs)?,
        cmlm_rate: a.cmlm_rate,
        ngram_probs: parse_probs("--ngram-probs", &a.ngram_probs)?,
        max_len: a.max_len,
        seed: a.seed,
        task,
    };
    cfg.validate()?;
    let corpus = read_corpus_lines(&a.input)?;
    let vocab_path = std::fs::canonicalize(&a.vocab).unwrap_or(a.vocab.clone());
    let mut extra = serde_json::Map::new();
    extra.insert("vocab_path".into(), vocab_path.display().to_string().into());
    extra.insert("vocab_granularity".into(), vocab_granularity.name().into());
    extra.insert(
        "input_granularity".into(),
        a.input_granularity.name().into(),
    );
    extra.insert("shard_size".into(), a.shard_size.into());
    let opts = BuildOptions {
        workers: a.workers,
        shard_size: a.shard_size,
    };
    let manifest = dataset::build_dataset(&corpus, &vocab, &cfg, &a.out, &opts, extra)?;
    eprintln!(
        "wrote {} examples in {} shards to {} (fingerprint {})",
        manifest.total_examples,
        manifest.shards.len(),
        a.out.display(),
        manifest.fingerprint
    );
    Ok(())
}

/// Loads `--vocab`, or the vocabulary recorded in the dataset manifest, and
/// checks it against the digest recorded there.
fn dataset_vocab(
    dataset_path: &Path,
    explicit: Option<&Path>,
) -> Result<Vocabulary, Box<dyn std::error::Error>> {
    let manifest = if dataset_path.is_dir() {
        Some(dataset::read_manifest(dataset_path)?)
    } else {
        None
    };
    let recorded = |key: &str| {
        manifest
            .as_ref()
            .and_then(|m| m.config.get(key))
            .and_then(|v| v.as_str())
            .map(str::to_string)
    };
    let path = match (explicit, recorded("vocab_path")) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(format!(
                "{}: no --vocab given and no vocab_path in manifest",
                dataset_path.display()
            )
            .into())
        }
    };
    let vocab = Vocabulary::load(&path)?;
    if let Some(digest) = recorded("vocab_digest") {
        if digest != vocab.digest() {
            return Err(format!(
                "{}: vocabulary digest differs from the one the dataset was built with",
                path.display()
            )
            .into());
        }
    }
    Ok(vocab)
}

fn stats(a: StatsArgs) -> CmdResult {
    let vocab = dataset_vocab(&a.dataset, a.vocab.as_deref())?;
    let paths = dataset::dataset_paths(&a.dataset)?;
    let stats = dataset::compute_stats(&paths, &vocab)?;
    println!("{}", serde_json::to_string_pretty(&stats.to_json())?);
    Ok(())
}

fn inspect(a: InspectArgs) -> CmdResult {
    let vocab = dataset_vocab(&a.dataset, a.vocab.as_deref())?;
    let paths = dataset::dataset_paths(&a.dataset)?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    let surface = |id: u32| {
        vocab
            .piece(id)
            .map_or_else(|| format!("<{id}>"), |p| p.surface.clone())
    };
    for (n, ex) in dataset::read_shards(&paths).take(a.n).enumerate() {
        let ex = ex?;
        let analysis = analyze_example(&ex, &vocab);
        let sep = ex
            .input_ids
            .iter()
            .position(|&id| id == SEP_ID)
            .unwrap_or(ex.input_ids.len() - 1);

        // per-position notes, aligned through the recovered words
        let mut notes = vec![String::new(); sep + 1];
        if analysis.violations == 0 {
            let mut pos = 1;
            for w in &analysis.words {
                let width = match w.corruption {
                    Some(Corruption::Expanded) => vocab.piece(w.id).map_or(1, |p| p.char_len()),
                    _ => 1,
                };
                let note = match w.corruption {
                    None => String::new(),
                    Some(Corruption::Mask) => "mask".into(),
                    Some(Corruption::Random) => "random".into(),
                    Some(Corruption::Keep) => "keep".into(),
                    Some(Corruption::Expanded) => format!("expand {}", surface(w.id)),
                };
                for slot in notes.iter_mut().skip(pos).take(width) {
                    *slot = note.clone();
                }
                pos += width;
            }
        }

        let labeled = ex.labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
        let padding = ex.input_ids[sep + 1..]
            .iter()
            .filter(|&&id| id == PAD_ID)
            .count();
        writeln!(
            out,
            "example {n}: {} positions, {labeled} labeled, {padding} padding",
            sep + 1
        )?;
        if analysis.violations > 0 {
            writeln!(
                out,
                "  warning: {} label consistency violations",
                analysis.violations
            )?;
        }
        writeln!(
            out,
            "  {:>4}  {:<10}  {:<10}  note",
            "pos", "input", "label"
        )?;
        for (p, note) in notes.iter().enumerate() {
            let label = match ex.labels[p] {
                IGNORE_LABEL => String::new(),
                l => surface(l as u32),
            };
            let line = format!(
                "  {:>4}  {:<10}  {:<10}  {}",
                p,
                surface(ex.input_ids[p]),
                label,
                note
            );
            writeln!(out, "{}", line.trim_end())?;
        }
        let original: Vec<String> = analysis.original_ids().into_iter().map(surface).collect();
        writeln!(out, "  original: {}", original.join(" "))?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
