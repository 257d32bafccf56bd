//! Sharded JSON-lines storage for training examples, and masking statistics
//! recomputed from the stored examples alone.
//!
//! Each shard `shard-00000.jsonl` starts with one header line
//! `{"format_version":1,"fingerprint":"…","max_len":512,"example_count":N}`
//! followed by one `{"input_ids":[…],"labels":[…],"attention":[…]}` per line.
//! A `manifest.json` next to the shards lists them with the generating config.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeOptions};
use crate::mmlm::{make_example, MaskingConfig, TrainingExample, IGNORE_LABEL};
use crate::textnorm::NormalizedText;
use crate::vocab::{PieceKind, Vocabulary, CLS_ID, MASK_ID, PAD_ID, SEP_ID};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Lines generated in parallel before being handed to the writer.
const BLOCK_LINES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format_version: u32,
    pub fingerprint: String,
    pub max_len: usize,
    pub example_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub path: PathBuf,
    pub example_count: usize,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestShard {
    pub path: String,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub total_examples: usize,
    pub shards: Vec<ManifestShard>,
    pub config: serde_json::Value,
}

/// 64-bit fingerprint (hex) of the canonical masking config and the
/// vocabulary digest.
pub fn fingerprint(cfg: &MaskingConfig, vocab_digest: &str) -> String {
    let canonical = serde_json::to_value(cfg)
        .expect("config serializes")
        .to_string();
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.update(b"\n");
    h.update(vocab_digest.as_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Writes examples in order, `shard_size` per file.
pub struct ShardWriter {
    out_dir: PathBuf,
    shard_size: usize,
    fingerprint: String,
    max_len: usize,
    pending: Vec<String>,
    shards: Vec<Shard>,
}

impl ShardWriter {
    pub fn new(
        out_dir: impl Into<PathBuf>,
        shard_size: usize,
        fingerprint: String,
        max_len: usize,
    ) -> Result<Self> {
        if shard_size == 0 {
            return Err(Error::InvalidConfig("shard_size must be positive".into()));
        }
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(ShardWriter {
            out_dir,
            shard_size,
            fingerprint,
            max_len,
            pending: Vec::with_capacity(shard_size),
            shards: Vec::new(),
        })
    }

    pub fn push(&mut self, example: &TrainingExample) -> Result<()> {
        self.pending
            .push(serde_json::to_string(example).expect("example serializes"));
        if self.pending.len() == self.shard_size {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let path = self
            .out_dir
            .join(format!("shard-{:05}.jsonl", self.shards.len()));
        let header = ShardHeader {
            format_version: FORMAT_VERSION,
            fingerprint: self.fingerprint.clone(),
            max_len: self.max_len,
            example_count: self.pending.len(),
        };
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        writeln!(
            w,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(io)?;
        for line in self.pending.drain(..) {
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)?;
        self.shards.push(Shard {
            path,
            example_count: header.example_count,
            config_fingerprint: header.fingerprint,
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<Shard>> {
        self.flush()?;
        Ok(self.shards)
    }
}

pub fn write_shards<'a>(
    examples: impl IntoIterator<Item = &'a TrainingExample>,
    out_dir: impl AsRef<Path>,
    shard_size: usize,
    fingerprint: &str,
    max_len: usize,
) -> Result<Vec<Shard>> {
    let mut w = ShardWriter::new(
        out_dir.as_ref(),
        shard_size,
        fingerprint.to_string(),
        max_len,
    )?;
    for ex in examples {
        w.push(ex)?;
    }
    w.finish()
}

pub fn write_manifest(
    out_dir: impl AsRef<Path>,
    shards: &[Shard],
    fingerprint: &str,
    config: serde_json::Value,
) -> Result<Manifest> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        fingerprint: fingerprint.to_string(),
        total_examples: shards.iter().map(|s| s.example_count).sum(),
        shards: shards
            .iter()
            .map(|s| ManifestShard {
                path: s
                    .path
                    .file_name()
                    .expect("shard file name")
                    .to_string_lossy()
                    .into_owned(),
                examples: s.example_count,
            })
            .collect(),
        config,
    };
    let path = out_dir.as_ref().join(MANIFEST_FILE);
    // via Value so object keys come out sorted
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let text = serde_json::to_string_pretty(&value).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Shard paths of a dataset directory (from its manifest) or a single shard file.
pub fn dataset_paths(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if path.is_dir() {
        let manifest = read_manifest(path)?;
        Ok(manifest.shards.iter().map(|s| path.join(&s.path)).collect())
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub workers: usize,
    pub shard_size: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            workers: 1,
            shard_size: 10_000,
        }
    }
}

/// Generates one example per corpus line (ordinal = line index) and writes
/// shards plus manifest. Output bytes do not depend on `opts.workers`.
pub fn build_dataset(
    corpus: &[NormalizedText],
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    out_dir: impl AsRef<Path>,
    opts: &BuildOptions,
    extra_config: serde_json::Map<String, serde_json::Value>,
) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let digest = vocab.digest();
    let fp = fingerprint(cfg, &digest);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut writer = ShardWriter::new(out_dir, opts.shard_size, fp.clone(), cfg.max_len)?;
    for (b, block) in corpus.chunks(BLOCK_LINES).enumerate() {
        let base = b * BLOCK_LINES;
        let examples: Vec<Result<TrainingExample>> = pool.install(|| {
            block
                .par_iter()
                .enumerate()
                .map(|(i, line)| make_example(line, vocab, cfg, (base + i) as u64))
                .collect()
        });
        for ex in examples {
            writer.push(&ex?)?;
        }
    }
    let shards = writer.finish()?;

    let mut config = match serde_json::to_value(cfg).expect("config serializes") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    };
    config.insert("vocab_digest".into(), digest.into());
    config.extend(extra_config);
    write_manifest(out_dir, &shards, &fp, serde_json::Value::Object(config))
}

/// Streams examples from shards in order, checking headers and fingerprints.
pub fn read_shards(paths: &[PathBuf]) -> ShardReader {
    ShardReader {
        paths: paths.to_vec(),
        next_path: 0,
        current: None,
        fingerprint: None,
    }
}

pub fn read_all(paths: &[PathBuf]) -> Result<Vec<TrainingExample>> {
    read_shards(paths).collect()
}

/// Header of a shard file.
pub fn read_header(path: &Path) -> Result<ShardHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &first)
}

fn parse_header(path: &Path, line: &str) -> Result<ShardHeader> {
    let header: ShardHeader = serde_json::from_str(line)
        .map_err(|e| Error::format(format!("{}:1", path.display()), format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            format!("{}:1", path.display()),
            format!("unsupported format version {}", header.format_version),
        ));
    }
    Ok(header)
}

struct OpenShard {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    header: ShardHeader,
    line_no: usize,
    seen: usize,
}

pub struct ShardReader {
    paths: Vec<PathBuf>,
    next_path: usize,
    current: Option<OpenShard>,
    fingerprint: Option<String>,
}

impl ShardReader {
    fn open_next(&mut self) -> Option<Result<()>> {
        let path = self.paths.get(self.next_path)?.clone();
        self.next_path += 1;
        Some(self.open(path))
    }

    fn open(&mut self, path: PathBuf) -> Result<()> {
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(&path, e))?,
            None => {
                return Err(Error::format(
                    format!("{}:1", path.display()),
                    "missing header",
                ))
            }
        };
        let header = parse_header(&path, &first)?;
        match &self.fingerprint {
            Some(fp) if *fp != header.fingerprint => {
                return Err(Error::FingerprintMismatch {
                    path,
                    expected: fp.clone(),
                    found: header.fingerprint,
                })
            }
            Some(_) => {}
            None => self.fingerprint = Some(header.fingerprint.clone()),
        }
        self.current = Some(OpenShard {
            path,
            lines,
            header,
            line_no: 1,
            seen: 0,
        });
        Ok(())
    }
}

impl Iterator for ShardReader {
    type Item = Result<TrainingExample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.current.is_none() {
                match self.open_next()? {
                    Ok(()) => {}
                    Err(e) => {
                        self.next_path = self.paths.len();
                        return Some(Err(e));
                    }
                }
            }
            let shard = self.current.as_mut().expect("shard open");
            let line = match shard.lines.next() {
                None => {
                    let shard = self.current.take().expect("shard open");
                    if shard.seen != shard.header.example_count {
                        self.next_path = self.paths.len();
                        return Some(Err(Error::format(
                            format!("{}:{}", shard.path.display(), shard.line_no + 1),
                            format!(
                                "header declares {} examples, found {}",
                                shard.header.example_count, shard.seen
                            ),
                        )));
                    }
                    continue;
                }
                Some(Err(e)) => return Some(Err(Error::io(&shard.path, e))),
                Some(Ok(l)) => l,
            };
            shard.line_no += 1;
            let loc = || format!("{}:{}", shard.path.display(), shard.line_no);
            let ex: TrainingExample = match serde_json::from_str(&line) {
                Ok(ex) => ex,
                Err(e) => {
                    let err = Error::format(loc(), e.to_string());
                    self.current = None;
                    self.next_path = self.paths.len();
                    return Some(Err(err));
                }
            };
            let n = shard.header.max_len;
            if ex.input_ids.len() != n || ex.labels.len() != n || ex.attention.len() != n {
                let err = Error::format(loc(), format!("example length differs from max_len {n}"));
                self.current = None;
                self.next_path = self.paths.len();
                return Some(Err(err));
            }
            shard.seen += 1;
            return Some(Ok(ex));
        }
    }
}

/// A word of the original sequence as recovered from an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecoveredWord {
    pub id: u32,
    pub corruption: Option<Corruption>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
    Expanded,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExampleAnalysis {
    /// Original non-special words in order.
    pub words: Vec<RecoveredWord>,
    pub violations: u64,
}

impl ExampleAnalysis {
    /// The original sequence with `[CLS]`/`[SEP]`.
    pub fn original_ids(&self) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.words.len() + 2);
        ids.push(CLS_ID);
        ids.extend(self.words.iter().map(|w| w.id));
        ids.push(SEP_ID);
        ids
    }
}

fn is_char_label(label: i64, vocab: &Vocabulary) -> bool {
    u32::try_from(label)
        .ok()
        .and_then(|id| vocab.piece(id))
        .is_some_and(|p| p.kind == PieceKind::Char)
}

/// Recovers the original words of an example and counts invariant
/// violations.
///
/// Runs of `[MASK]` labeled with character pieces are re-segmented with
/// Viterbi: the original segmentation restricted to a run is itself an
/// optimal path over the run's text, so multi-character pieces found there
/// are the expanded words and single characters were masked on their own.
pub fn analyze_example(ex: &TrainingExample, vocab: &Vocabulary) -> ExampleAnalysis {
    let mut out = ExampleAnalysis::default();
    let n = ex.input_ids.len();
    if n == 0 || ex.labels.len() != n || ex.attention.len() != n {
        out.violations += 1;
        return out;
    }
    if ex.input_ids[0] != CLS_ID || ex.labels[0] != IGNORE_LABEL {
        out.violations += 1;
    }
    let Some(sep) = ex.input_ids.iter().position(|&id| id == SEP_ID) else {
        out.violations += 1;
        return out;
    };
    if ex.labels[sep] != IGNORE_LABEL {
        out.violations += 1;
    }
    for p in 0..n {
        let real = p <= sep;
        if ex.attention[p] != u8::from(real) {
            out.violations += 1;
        }
        if !real && (ex.input_ids[p] != PAD_ID || ex.labels[p] != IGNORE_LABEL) {
            out.violations += 1;
        }
    }

    let opts = LatticeOptions {
        max_piece_len: vocab.max_piece_chars().max(1),
        ..LatticeOptions::default()
    };
    let mut p = 1;
    while p < sep {
        let input = ex.input_ids[p];
        let label = ex.labels[p];
        if input == MASK_ID && is_char_label(label, vocab) {
            let mut end = p;
            while end < sep && ex.input_ids[end] == MASK_ID && is_char_label(ex.labels[end], vocab)
            {
                end += 1;
            }
            let chars: Vec<char> = ex.labels[p..end]
                .iter()
                .filter_map(|&l| vocab.piece(l as u32).and_then(|pc| pc.as_char()))
                .collect();
            match Lattice::build(&chars, vocab.index(), &opts).viterbi() {
                Ok(path) => {
                    for id in path.piece_ids {
                        let kind = vocab.piece(id).map(|pc| pc.kind);
                        let corruption = match kind {
                            Some(PieceKind::Word) => Corruption::Expanded,
                            Some(PieceKind::Char) => Corruption::Mask,
                            _ => {
                                out.violations += 1;
                                Corruption::Mask
                            }
                        };
                        out.words.push(RecoveredWord {
                            id,
                            corruption: Some(corruption),
                        });
                    }
                }
                Err(_) => out.violations += 1,
            }
            p = end;
            continue;
        }
        if label == IGNORE_LABEL {
            if vocab.is_special(input) || vocab.piece(input).is_none() {
                // [UNK] passes through unmasked; anything else is misplaced
                if input != crate::vocab::UNK_ID {
                    out.violations += 1;
                }
            }
            out.words.push(RecoveredWord {
                id: input,
                corruption: None,
            });
        } else {
            let valid = u32::try_from(label)
                .ok()
                .filter(|&id| vocab.piece(id).is_some() && !vocab.is_special(id));
            match valid {
                Some(id) => {
                    let corruption = if input == MASK_ID {
                        Corruption::Mask
                    } else if input == id {
                        Corruption::Keep
                    } else {
                        Corruption::Random
                    };
                    if corruption == Corruption::Random
                        && (vocab.is_special(input) || vocab.piece(input).is_none())
                    {
                        out.violations += 1;
                    }
                    out.words.push(RecoveredWord {
                        id,
                        corruption: Some(corruption),
                    });
                }
                None => out.violations += 1,
            }
        }
        p += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCounts {
    pub mask: u64,
    pub random: u64,
    pub keep: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingStats {
    pub examples: u64,
    pub word_positions_total: u64,
    pub masked_words: u64,
    pub masked_fraction: f64,
    /// Masked words that were not expanded, by observed corruption. A random
    /// replacement that drew the original piece is indistinguishable from keep.
    pub action_counts: ActionCounts,
    pub masked_multichar_words: u64,
    pub expanded_words: u64,
    pub expand_fraction_multichar: f64,
    /// Maximal runs of consecutive masked words of length 1..=4. Adjacent
    /// spans merge into one run; runs longer than 4 go to `long_runs`.
    pub span_length_histogram: [u64; 4],
    pub long_runs: u64,
    pub label_consistency_violations: u64,
}

impl MaskingStats {
    pub fn add(&mut self, analysis: &ExampleAnalysis, vocab: &Vocabulary) {
        self.examples += 1;
        self.label_consistency_violations += analysis.violations;
        let mut run = 0usize;
        let close_run = |run: &mut usize, stats: &mut Self| {
            match *run {
                0 => {}
                1..=4 => stats.span_length_histogram[*run - 1] += 1,
                _ => stats.long_runs += 1,
            }
            *run = 0;
        };
        for w in &analysis.words {
            self.word_positions_total += 1;
            let Some(c) = w.corruption else {
                close_run(&mut run, self);
                continue;
            };
            run += 1;
            self.masked_words += 1;
            if vocab.piece(w.id).is_some_and(|p| p.kind == PieceKind::Word) {
                self.masked_multichar_words += 1;
            }
            match c {
                Corruption::Mask => self.action_counts.mask += 1,
                Corruption::Random => self.action_counts.random += 1,
                Corruption::Keep => self.action_counts.keep += 1,
                Corruption::Expanded => self.expanded_words += 1,
            }
        }
        close_run(&mut run, self);
        self.refresh_fractions();
    }

    fn refresh_fractions(&mut self) {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.masked_fraction = ratio(self.masked_words, self.word_positions_total);
        self.expand_fraction_multichar = ratio(self.expanded_words, self.masked_multichar_words);
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("stats serialize")
    }
}

pub fn compute_stats(paths: &[PathBuf], vocab: &Vocabulary) -> Result<MaskingStats> {
    let mut stats = MaskingStats::default();
    for ex in read_shards(paths) {
        stats.add(&analyze_example(&ex?, vocab), vocab);
    }
    Ok(stats)
}
