//! Mixed masked-language-model example generation.
//!
//! Words (mixed-granularity pieces) are masked in n-gram spans until a word
//! budget is met. Each masked word is either corrupted the usual way
//! (`[MASK]`, random piece, or kept) or, under the mixed task, replaced by one
//! `[MASK]` per character with the characters as labels.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textnorm::NormalizedText;
use crate::tokenizer::{add_specials, encode, Mode, TokenSequence};
use crate::vocab::{PieceKind, Vocabulary, CLS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};

/// Label of positions that are not predicted.
pub const IGNORE_LABEL: i64 = -100;

/// Random stream used for one sequence.
pub type MaskRng = ChaCha20Rng;

/// The stream for a sequence depends only on the dataset seed and the
/// sequence's ordinal, so examples can be generated in any order.
pub fn rng_for(seed: u64, ordinal: u64) -> MaskRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Word-level masking only.
    Mlm,
    /// Word-level masking with character expansion of masked words.
    Mmlm,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Task::Mlm),
            "mmlm" => Ok(Task::Mmlm),
            other => Err(Error::InvalidConfig(format!(
                "unknown task {other:?} (expected mlm or mmlm)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Mlm => "mlm",
            Task::Mmlm => "mmlm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    /// Fraction of words covered by spans.
    pub mask_rate: f64,
    /// Probabilities of `[MASK]`, random piece, keep.
    pub action_probs: [f64; 3],
    /// Probability a masked word is expanded to characters (mixed task only).
    pub cmlm_rate: f64,
    /// Probabilities of span lengths 1..=4.
    pub ngram_probs: [f64; 4],
    pub max_len: usize,
    pub seed: u64,
    pub task: Task,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_rate: 0.15,
            action_probs: [0.8, 0.1, 0.1],
            cmlm_rate: 0.20,
            ngram_probs: [0.4, 0.3, 0.2, 0.1],
            max_len: 512,
            seed: 0,
            task: Task::Mmlm,
        }
    }
}

const PROB_SUM_TOLERANCE: f64 = 1e-9;

fn check_distribution(name: &str, probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "{name} must be non-negative, got {probs:?}"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::InvalidConfig(format!(
            "{name} must sum to 1, got {probs:?} (sum {sum})"
        )));
    }
    Ok(())
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidConfig(format!(
                "mask_rate {} not in [0,1]",
                self.mask_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.cmlm_rate) {
            return Err(Error::InvalidConfig(format!(
                "cmlm_rate {} not in [0,1]",
                self.cmlm_rate
            )));
        }
        check_distribution("action_probs", &self.action_probs)?;
        check_distribution("ngram_probs", &self.ngram_probs)?;
        if self.max_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "max_len {} cannot hold [CLS] and [SEP]",
                self.max_len
            )));
        }
        Ok(())
    }
}

/// Parses comma-separated probabilities, e.g. `0.4,0.3,0.2,0.1`.
pub fn parse_probs<const N: usize>(name: &str, s: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("{name}: cannot parse {s:?}")))?;
    let arr: [f64; N] = values.try_into().map_err(|v: Vec<f64>| {
        Error::InvalidConfig(format!("{name}: expected {N} values, got {}", v.len()))
    })?;
    check_distribution(name, &arr)?;
    Ok(arr)
}

/// Consecutive word positions `[start, start + len)` masked together.
/// `drawn` is the n-gram length sampled before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub drawn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    MaskWord,
    RandomWord(u32),
    Keep,
    ExpandChars,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    /// Index into the token sequence (with specials).
    pub position: usize,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskingPlan {
    /// Sorted by position, one entry per masked word.
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub attention: Vec<u8>,
}

fn is_word(id: u32) -> bool {
    id as usize >= NUM_SPECIALS
}

/// Budget of covered words for `words` maskable positions.
pub fn mask_budget(mask_rate: f64, words: usize) -> usize {
    // the epsilon absorbs products like 0.15 * 60 = 8.999...
    (mask_rate * words as f64 + 1e-9).floor() as usize
}

/// Draws n-gram spans over the non-special positions of `seq` until the
/// covered word count reaches the budget.
pub fn select_spans(seq: &TokenSequence, cfg: &MaskingConfig, rng: &mut MaskRng) -> Vec<Span> {
    let words: Vec<usize> = (0..seq.len()).filter(|&p| is_word(seq.ids[p])).collect();
    let budget = mask_budget(cfg.mask_rate, words.len());
    if budget == 0 {
        return Vec::new();
    }
    let ngram = WeightedIndex::new(cfg.ngram_probs).expect("validated ngram_probs");
    let mut covered = vec![false; seq.len()];
    // indices into `words` that are still uncovered
    let mut free: Vec<usize> = (0..words.len()).collect();
    let mut count = 0;
    let mut spans = Vec::new();
    while count < budget && !free.is_empty() {
        let n = ngram.sample(rng) + 1;
        let w = free[rng.gen_range(0..free.len())];
        let start = words[w];
        let mut len = 1;
        while len < n {
            let next = start + len;
            if next >= seq.len() || !is_word(seq.ids[next]) || covered[next] {
                break;
            }
            len += 1;
        }
        covered[start..start + len]
            .iter_mut()
            .for_each(|c| *c = true);
        count += len;
        free.retain(|&i| !covered[words[i]]);
        spans.push(Span {
            start,
            len,
            drawn: n,
        });
    }
    spans
}

/// Chooses the corruption for every word covered by `spans`.
pub fn assign_actions(
    spans: &[Span],
    seq: &TokenSequence,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    rng: &mut MaskRng,
) -> MaskingPlan {
    let actions = WeightedIndex::new(cfg.action_probs).expect("validated action_probs");
    let mut positions: Vec<usize> = spans
        .iter()
        .flat_map(|s| s.start..s.start + s.len)
        .collect();
    positions.sort_unstable();
    let decisions = positions
        .into_iter()
        .map(|position| {
            let id = seq.ids[position];
            let expand = cfg.task == Task::Mmlm
                && rng.gen_bool(cfg.cmlm_rate)
                && vocab.piece(id).is_some_and(|p| p.kind == PieceKind::Word);
            let action = if expand {
                Action::ExpandChars
            } else {
                match actions.sample(rng) {
                    0 => Action::MaskWord,
                    1 if vocab.len() > NUM_SPECIALS => {
                        Action::RandomWord(rng.gen_range(NUM_SPECIALS as u32..vocab.len() as u32))
                    }
                    1 => Action::MaskWord,
                    _ => Action::Keep,
                }
            };
            Decision { position, action }
        })
        .collect();
    MaskingPlan { decisions }
}

/// Realizes `plan` on `seq` as a fixed-length example of `cfg.max_len`.
///
/// An expansion that would make the sequence longer than `max_len` is
/// downgraded to a plain `[MASK]`.
pub fn apply_plan(
    seq: &TokenSequence,
    plan: &MaskingPlan,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
) -> Result<TrainingExample> {
    if seq.ids.first() != Some(&CLS_ID) || seq.ids.last() != Some(&SEP_ID) {
        return Err(Error::format(
            "plan",
            "sequence must be wrapped in [CLS] ... [SEP]",
        ));
    }
    let mut decisions = plan.decisions.iter().peekable();
    let mut inputs: Vec<u32> = Vec::with_capacity(cfg.max_len);
    let mut labels: Vec<i64> = Vec::with_capacity(cfg.max_len);
    let mut projected = seq.len();
    let mut last = None;

    for (pos, &id) in seq.ids.iter().enumerate() {
        let decision = match decisions.peek() {
            Some(d) if d.position == pos => decisions.next(),
            _ => None,
        };
        let Some(d) = decision else {
            inputs.push(id);
            labels.push(IGNORE_LABEL);
            continue;
        };
        if !is_word(id) || last.is_some_and(|l| l >= pos) {
            return Err(Error::format(
                "plan",
                format!("decision at {pos} targets a special token or is out of order"),
            ));
        }
        last = Some(pos);
        let label = id as i64;
        match d.action {
            Action::MaskWord => {
                inputs.push(MASK_ID);
                labels.push(label);
            }
            Action::RandomWord(r) => {
                inputs.push(r);
                labels.push(label);
            }
            Action::Keep => {
                inputs.push(id);
                labels.push(label);
            }
            Action::ExpandChars => {
                let piece = vocab.piece(id).ok_or(Error::UnknownId(id))?;
                let char_ids = piece
                    .surface
                    .chars()
                    .map(|c| vocab.char_id(c).ok_or(Error::MissingCharPiece(c)))
                    .collect::<Result<Vec<u32>>>()?;
                let grown = projected + char_ids.len() - 1;
                if char_ids.len() < 2 || grown > cfg.max_len {
                    inputs.push(MASK_ID);
                    labels.push(label);
                } else {
                    projected = grown;
                    for cid in char_ids {
                        inputs.push(MASK_ID);
                        labels.push(cid as i64);
                    }
                }
            }
        }
    }
    if let Some(d) = decisions.next() {
        return Err(Error::format(
            "plan",
            format!("decision at {} is outside the sequence", d.position),
        ));
    }

    if inputs.len() > cfg.max_len {
        inputs.truncate(cfg.max_len - 1);
        labels.truncate(cfg.max_len - 1);
        inputs.push(SEP_ID);
        labels.push(IGNORE_LABEL);
    }
    let real = inputs.len();
    inputs.resize(cfg.max_len, PAD_ID);
    labels.resize(cfg.max_len, IGNORE_LABEL);
    let mut attention = vec![1u8; real];
    attention.resize(cfg.max_len, 0);
    Ok(TrainingExample {
        input_ids: inputs,
        labels,
        attention,
    })
}

/// Every intermediate product of generating one example.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    /// Encoded text with `[CLS]`/`[SEP]`, truncated to fit `max_len`.
    pub sequence: TokenSequence,
    pub spans: Vec<Span>,
    pub plan: MaskingPlan,
    pub example: TrainingExample,
}

/// Encodes `text` and masks it with the stream for `ordinal`.
pub fn generate(
    text: &NormalizedText,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    ordinal: u64,
) -> Result<MaskedSample> {
    let mut seq = encode(text, vocab, Mode::Mixed);
    seq.ids.truncate(cfg.max_len.saturating_sub(2));
    seq.spans.truncate(cfg.max_len.saturating_sub(2));
    let sequence = add_specials(&seq)?;
    generate_from_sequence(sequence, vocab, cfg, ordinal)
}

/// As [`generate`], for an already encoded sequence with specials.
pub fn generate_from_sequence(
    sequence: TokenSequence,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    ordinal: u64,
) -> Result<MaskedSample> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, ordinal);
    let spans = select_spans(&sequence, cfg, &mut rng);
    let plan = assign_actions(&spans, &sequence, vocab, cfg, &mut rng);
    let example = apply_plan(&sequence, &plan, vocab, cfg)?;
    Ok(MaskedSample {
        sequence,
        spans,
        plan,
        example,
    })
}

pub fn make_example(
    text: &NormalizedText,
    vocab: &Vocabulary,
    cfg: &MaskingConfig,
    ordinal: u64,
) -> Result<TrainingExample> {
    generate(text, vocab, cfg, ordinal).map(|s| s.example)
}
