//! Unigram language model training.
//!
//! Seeds candidates from exhaustive n-gram counts, re-estimates piece
//! probabilities with EM over segmentation lattices, and prunes the pieces
//! whose removal costs the least corpus likelihood until the target size is
//! reached. Every character that meets the coverage threshold is protected
//! from pruning.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeOptions};
use crate::textnorm::NormalizedText;
use crate::vocab::{rank_order, Piece, PieceIndex, Vocabulary, NUM_SPECIALS, SPECIAL_SURFACES};

/// Log-probability assigned to candidates that received no expected count.
pub const UNUSED_LOG_PROB: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    /// Final vocabulary size, specials included.
    pub target_size: usize,
    pub seed_size: usize,
    pub max_piece_len: usize,
    pub em_iters_per_round: usize,
    pub shrink_keep_ratio: f64,
    pub char_coverage: f64,
    /// Recorded for reproducibility; every tie-break in training is a total
    /// order, so no randomness is currently drawn from it.
    pub seed: u64,
    pub unk_penalty: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::with_target(40_000)
    }
}

impl TrainerConfig {
    pub fn with_target(target_size: usize) -> Self {
        TrainerConfig {
            target_size,
            seed_size: 4 * target_size,
            max_piece_len: 8,
            em_iters_per_round: 2,
            shrink_keep_ratio: 0.75,
            char_coverage: 1.0,
            seed: 0,
            unk_penalty: LatticeOptions::default().unk_penalty,
        }
    }

    /// Desk-scale defaults (5,000 pieces).
    pub fn desk() -> Self {
        Self::with_target(5_000)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.target_size == 0 {
            return bad("target_size must be positive".into());
        }
        if self.seed_size < self.target_size {
            return bad(format!(
                "seed_size {} must be >= target_size {}",
                self.seed_size, self.target_size
            ));
        }
        if self.max_piece_len == 0 {
            return bad("max_piece_len must be positive".into());
        }
        if self.em_iters_per_round == 0 {
            return bad("em_iters_per_round must be positive".into());
        }
        if !(self.shrink_keep_ratio > 0.0 && self.shrink_keep_ratio < 1.0) {
            return bad(format!(
                "shrink_keep_ratio {} not in (0,1)",
                self.shrink_keep_ratio
            ));
        }
        if !(self.char_coverage > 0.0 && self.char_coverage <= 1.0) {
            return bad(format!("char_coverage {} not in (0,1]", self.char_coverage));
        }
        Ok(())
    }

    fn lattice_options(&self) -> LatticeOptions {
        LatticeOptions {
            max_piece_len: self.max_piece_len,
            unk_penalty: self.unk_penalty,
        }
    }
}

/// Working set of candidate pieces with their current log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    surfaces: Vec<String>,
    log_probs: Vec<f64>,
}

impl CandidateSet {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        let (surfaces, log_probs) = entries.into_iter().unzip();
        CandidateSet {
            surfaces,
            log_probs,
        }
    }

    /// Candidates scored by normalized log relative frequency of `counts`.
    pub fn from_counts(entries: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut set = Self::new(entries);
        let total: f64 = set.log_probs.iter().sum();
        let log_total = total.ln();
        for lp in &mut set.log_probs {
            *lp = lp.ln() - log_total;
        }
        set
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.surfaces
            .iter()
            .map(String::as_str)
            .zip(self.log_probs.iter().copied())
    }

    pub fn log_prob(&self, surface: &str) -> Option<f64> {
        self.surfaces
            .iter()
            .position(|s| s == surface)
            .map(|i| self.log_probs[i])
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn with_log_probs(mut self, log_probs: Vec<f64>) -> Self {
        assert_eq!(log_probs.len(), self.surfaces.len());
        self.log_probs = log_probs;
        self
    }

    /// Single-character candidates.
    pub fn chars(&self) -> BTreeSet<char> {
        self.surfaces
            .iter()
            .filter_map(|s| {
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Some(c),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn to_pieces(&self) -> Vec<Piece> {
        self.iter().map(|(s, lp)| Piece::new(s, lp)).collect()
    }

    /// Lattice index where ids are candidate positions and `len()` is UNK.
    pub fn index(&self) -> PieceIndex {
        PieceIndex::new(
            self.surfaces
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i as u32)),
            self.log_probs.clone(),
            self.surfaces.len() as u32,
        )
    }

    fn retain_indices(&self, keep: &[bool]) -> Self {
        CandidateSet {
            surfaces: self
                .surfaces
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(s, _)| s.clone())
                .collect(),
            log_probs: self
                .log_probs
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(lp, _)| *lp)
                .collect(),
        }
    }
}

/// Characters in descending frequency order (ties by code point) up to the
/// smallest prefix whose mass reaches `coverage`.
pub fn covered_chars(char_counts: &FxHashMap<char, u64>, coverage: f64) -> Vec<(char, u64)> {
    let total: u64 = char_counts.values().sum();
    let mut sorted: Vec<(char, u64)> = char_counts.iter().map(|(&c, &n)| (c, n)).collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let threshold = coverage * total as f64;
    let mut cum = 0u64;
    let mut out = Vec::new();
    for (c, n) in sorted {
        if !out.is_empty() && cum as f64 >= threshold {
            break;
        }
        cum += n;
        out.push((c, n));
    }
    out
}

fn count_chars(corpus: &[NormalizedText]) -> FxHashMap<char, u64> {
    let mut counts = FxHashMap::default();
    for line in corpus {
        for c in line.as_str().chars() {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(PartialEq, Eq)]
struct Ranked {
    score: u64,
    len: usize,
    surface: String,
}

impl Ord for Ranked {
    // "Greater" means better: higher count x length, then shorter, then
    // smaller code points.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .cmp(&other.score)
            .then(other.len.cmp(&self.len))
            .then_with(|| other.surface.cmp(&self.surface))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Initial candidates: covered characters plus the best multi-character
/// substrings by count x length.
pub fn seed_vocabulary(corpus: &[NormalizedText], cfg: &TrainerConfig) -> Result<CandidateSet> {
    let char_counts = count_chars(corpus);
    if char_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let chars = covered_chars(&char_counts, cfg.char_coverage);
    let covered: FxHashMap<char, ()> = chars.iter().map(|&(c, _)| (c, ())).collect();
    let slots = cfg.seed_size.saturating_sub(chars.len());

    let lines: Vec<(&str, Vec<usize>)> = corpus
        .iter()
        .map(|l| {
            let s = l.as_str();
            let offsets = s.char_indices().map(|(i, _)| i).chain([s.len()]).collect();
            (s, offsets)
        })
        .collect();

    let mut best: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(slots + 1);
    for n in 2..=cfg.max_piece_len {
        if slots == 0 {
            break;
        }
        let mut counts: FxHashMap<&str, u64> = FxHashMap::default();
        for (s, offsets) in &lines {
            let nchars = offsets.len() - 1;
            // run of usable characters ending at each position
            let mut run = 0usize;
            for (k, c) in s.chars().enumerate() {
                if c == ' ' || !covered.contains_key(&c) {
                    run = 0;
                    continue;
                }
                run += 1;
                if run >= n {
                    let begin = k + 1 - n;
                    debug_assert!(k < nchars);
                    *counts
                        .entry(&s[offsets[begin]..offsets[k + 1]])
                        .or_insert(0) += 1;
                }
            }
        }
        for (surface, count) in counts {
            if n >= 5 && SPECIAL_SURFACES.iter().any(|sp| surface.contains(sp)) {
                continue;
            }
            let score = count * n as u64;
            if best.len() == slots {
                let worst = &best.peek().expect("non-empty").0;
                let beats = score > worst.score
                    || (score == worst.score
                        && (n < worst.len || (n == worst.len && surface < worst.surface.as_str())));
                if !beats {
                    continue;
                }
                best.pop();
            }
            best.push(Reverse(Ranked {
                score,
                len: n,
                surface: surface.to_string(),
            }));
        }
    }

    let mut words: Vec<Ranked> = best.into_iter().map(|r| r.0).collect();
    words.sort_by(|a, b| b.cmp(a));
    let entries = chars
        .into_iter()
        .map(|(c, n)| (c.to_string(), n as f64))
        .chain(
            words
                .into_iter()
                .map(|r| (r.surface, (r.score / r.len as u64) as f64)),
        );
    Ok(CandidateSet::from_counts(entries))
}

/// Chunk size for the data-parallel passes. Depends only on corpus size so
/// the reduction order is the same for any thread count.
fn chunk_len(lines: usize) -> usize {
    256.max(lines.div_ceil(128))
}

fn line_chars(line: &NormalizedText) -> Vec<char> {
    line.as_str().chars().collect()
}

/// Sum of expected piece counts and total log-likelihood of `corpus` under
/// the current candidate probabilities.
pub fn expected_counts(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    opts: &LatticeOptions,
) -> (Vec<f64>, f64) {
    let index = cands.index();
    let n = cands.len();
    let partials: Vec<(Vec<f64>, f64)> = corpus
        .par_chunks(chunk_len(corpus.len()))
        .map(|chunk| {
            let mut counts = vec![0.0; n];
            let mut ll = 0.0;
            for line in chunk {
                let lattice = Lattice::build(&line_chars(line), &index, opts);
                ll += lattice.accumulate_expected_counts(&mut counts);
            }
            (counts, ll)
        })
        .collect();
    let mut counts = vec![0.0; n];
    let mut ll = 0.0;
    for (c, l) in partials {
        for (acc, x) in counts.iter_mut().zip(c) {
            *acc += x;
        }
        ll += l;
    }
    (counts, ll)
}

/// One EM iteration. Returns the re-estimated log-probabilities and the
/// corpus log-likelihood under the probabilities passed in.
pub fn em_step(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    opts: &LatticeOptions,
) -> (Vec<f64>, f64) {
    let (counts, ll) = expected_counts(corpus, cands, opts);
    let total: f64 = counts.iter().sum();
    let log_total = total.ln();
    let log_probs = counts
        .iter()
        .map(|&c| {
            if c > 0.0 {
                c.ln() - log_total
            } else {
                UNUSED_LOG_PROB
            }
        })
        .collect();
    (log_probs, ll)
}

/// Approximate likelihood loss of removing each candidate: each Viterbi
/// usage of the piece is rerouted through the best segmentation of its own
/// surface without it. Unused pieces lose nothing.
pub fn pruning_losses(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    opts: &LatticeOptions,
) -> Vec<f64> {
    let index = cands.index();
    let n = cands.len();
    let partials: Vec<Vec<u64>> = corpus
        .par_chunks(chunk_len(corpus.len()))
        .map(|chunk| {
            let mut freq = vec![0u64; n];
            for line in chunk {
                let lattice = Lattice::build(&line_chars(line), &index, opts);
                let path = lattice
                    .viterbi()
                    .expect("lattice with UNK fallback is connected");
                for id in path.piece_ids {
                    if let Some(f) = freq.get_mut(id as usize) {
                        *f += 1;
                    }
                }
            }
            freq
        })
        .collect();
    let mut freq = vec![0u64; n];
    for part in partials {
        for (acc, x) in freq.iter_mut().zip(part) {
            *acc += x;
        }
    }

    (0..n)
        .into_par_iter()
        .map(|i| {
            if freq[i] == 0 {
                return 0.0;
            }
            let chars: Vec<char> = cands.surfaces[i].chars().collect();
            let alternative = if chars.len() == 1 {
                opts.unk_penalty
            } else {
                let lattice = Lattice::build(&chars, &index, opts);
                let own = lattice
                    .edges()
                    .iter()
                    .position(|e| e.piece_id == i as u32)
                    .expect("piece spans its own surface");
                lattice
                    .without_edge(own)
                    .viterbi()
                    .map(|p| p.score)
                    .unwrap_or(opts.unk_penalty * chars.len() as f64)
            };
            freq[i] as f64 * (cands.log_probs[i] - alternative)
        })
        .collect()
}

/// Keeps `protected` plus the `ceil(keep_ratio * unprotected)` pieces with
/// the largest [`pruning_losses`].
pub fn prune(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    keep_ratio: f64,
    protected: &BTreeSet<String>,
    opts: &LatticeOptions,
) -> CandidateSet {
    let unprotected = cands
        .surfaces
        .iter()
        .filter(|s| !protected.contains(*s))
        .count();
    let keep = (keep_ratio * unprotected as f64).ceil() as usize;
    prune_to(corpus, cands, keep, protected, opts)
}

fn prune_to(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    keep: usize,
    protected: &BTreeSet<String>,
    opts: &LatticeOptions,
) -> CandidateSet {
    let mut order: Vec<usize> = (0..cands.len())
        .filter(|&i| !protected.contains(&cands.surfaces[i]))
        .collect();
    if keep >= order.len() {
        return cands.clone();
    }
    let losses = pruning_losses(corpus, cands, opts);
    order.sort_by(|&a, &b| {
        losses[b].total_cmp(&losses[a]).then_with(|| {
            rank_order(
                &cands.surfaces[a],
                cands.log_probs[a],
                &cands.surfaces[b],
                cands.log_probs[b],
            )
        })
    });
    let mut retain: Vec<bool> = cands
        .surfaces
        .iter()
        .map(|s| protected.contains(s))
        .collect();
    for &i in &order[..keep] {
        retain[i] = true;
    }
    cands.retain_indices(&retain)
}

/// Trains a mixed character/word vocabulary of `cfg.target_size` pieces.
pub fn train(corpus: &[NormalizedText], cfg: &TrainerConfig) -> Result<Vocabulary> {
    train_with_progress(corpus, cfg, |_| {})
}

/// Progress events emitted while training.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Seeded {
        candidates: usize,
    },
    EmStep {
        candidates: usize,
        log_likelihood: f64,
    },
    Pruned {
        candidates: usize,
    },
}

pub fn train_with_progress(
    corpus: &[NormalizedText],
    cfg: &TrainerConfig,
    mut progress: impl FnMut(TrainEvent),
) -> Result<Vocabulary> {
    cfg.validate()?;
    let opts = cfg.lattice_options();
    let mut cands = seed_vocabulary(corpus, cfg)?;
    progress(TrainEvent::Seeded {
        candidates: cands.len(),
    });
    let required = cands.chars();
    let forced = NUM_SPECIALS + required.len();
    if cfg.target_size < forced {
        return Err(Error::TargetTooSmall {
            target: cfg.target_size,
            required: forced,
        });
    }
    let protected: BTreeSet<String> = required.iter().map(|c| c.to_string()).collect();
    let budget = cfg.target_size - NUM_SPECIALS;

    loop {
        for _ in 0..cfg.em_iters_per_round {
            let (log_probs, ll) = em_step(corpus, &cands, &opts);
            cands = cands.with_log_probs(log_probs);
            progress(TrainEvent::EmStep {
                candidates: cands.len(),
                log_likelihood: ll,
            });
        }
        if cands.len() <= budget {
            break;
        }
        let unprotected = cands.len() - protected.len();
        let keep = ((cfg.shrink_keep_ratio * unprotected as f64).ceil() as usize)
            .max(budget - protected.len())
            .min(unprotected - 1);
        cands = prune_to(corpus, &cands, keep, &protected, &opts);
        progress(TrainEvent::Pruned {
            candidates: cands.len(),
        });
    }

    Vocabulary::build_final(&cands.to_pieces(), cfg.target_size, &required)
}

/// A character-only vocabulary: specials plus covered characters scored by
/// relative frequency. Never contains word pieces.
pub fn train_char_vocab(
    corpus: &[NormalizedText],
    target_size: usize,
    char_coverage: f64,
) -> Result<Vocabulary> {
    let counts = count_chars(corpus);
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let chars = covered_chars(&counts, char_coverage);
    let required: BTreeSet<char> = chars.iter().map(|&(c, _)| c).collect();
    let cands =
        CandidateSet::from_counts(chars.into_iter().map(|(c, n)| (c.to_string(), n as f64)));
    if target_size < NUM_SPECIALS + required.len() {
        return Err(Error::TargetTooSmall {
            target: target_size,
            required: NUM_SPECIALS + required.len(),
        });
    }
    Vocabulary::build_final(&cands.to_pieces(), target_size, &required)
}
