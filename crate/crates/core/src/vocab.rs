//! The mixed-granularity vocabulary: five special tokens, single characters
//! and multi-character words, each with a unigram log-probability.
//!
//! File format is UTF-8 TSV, one piece per line, `surface<TAB>log_prob<TAB>kind`
//! with kind one of `SPECIAL`, `CHAR`, `WORD`. Line order defines ids and the
//! first five lines are `[PAD] [UNK] [CLS] [SEP] [MASK]` with log_prob 0.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rustc_hash::FxHashMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PieceKind {
    Special,
    Char,
    Word,
}

impl PieceKind {
    fn as_str(self) -> &'static str {
        match self {
            PieceKind::Special => "SPECIAL",
            PieceKind::Char => "CHAR",
            PieceKind::Word => "WORD",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "SPECIAL" => Some(PieceKind::Special),
            "CHAR" => Some(PieceKind::Char),
            "WORD" => Some(PieceKind::Word),
            _ => None,
        }
    }
}

impl fmt::Display for PieceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub surface: String,
    pub log_prob: f64,
    pub kind: PieceKind,
}

impl Piece {
    /// A character or word piece; the kind follows from the surface length.
    ///
    /// # Panics
    /// If `surface` is empty.
    pub fn new(surface: impl Into<String>, log_prob: f64) -> Self {
        let surface = surface.into();
        let kind = match surface.chars().count() {
            0 => panic!("piece surface must be non-empty"),
            1 => PieceKind::Char,
            _ => PieceKind::Word,
        };
        Piece {
            surface,
            log_prob,
            kind,
        }
    }

    pub fn special(surface: impl Into<String>) -> Self {
        Piece {
            surface: surface.into(),
            log_prob: 0.0,
            kind: PieceKind::Special,
        }
    }

    pub fn char_len(&self) -> usize {
        self.surface.chars().count()
    }

    pub fn as_char(&self) -> Option<char> {
        match self.kind {
            PieceKind::Char => self.surface.chars().next(),
            _ => None,
        }
    }
}

/// Ordering used wherever pieces compete for a slot: higher log-probability
/// first, then shorter surface, then code-point order.
pub(crate) fn rank_order(a_surface: &str, a_lp: f64, b_surface: &str, b_lp: f64) -> Ordering {
    b_lp.total_cmp(&a_lp)
        .then_with(|| a_surface.chars().count().cmp(&b_surface.chars().count()))
        .then_with(|| a_surface.cmp(b_surface))
}

/// Character trie mapping surfaces to ids, with a score per id.
///
/// This is the lookup structure lattices are built from; both a finished
/// [`Vocabulary`] and the trainer's working candidate set are indexed by it.
#[derive(Debug, Clone)]
pub struct PieceIndex {
    transitions: FxHashMap<(u32, char), u32>,
    terminal: Vec<Option<u32>>,
    scores: Vec<f64>,
    unk_id: u32,
    max_piece_chars: usize,
}

impl PieceIndex {
    /// Builds an index over `(surface, id)` pairs. `scores[id]` is the edge
    /// score for that id; `unk_id` labels fallback edges.
    pub fn new<'a>(
        entries: impl IntoIterator<Item = (&'a str, u32)>,
        scores: Vec<f64>,
        unk_id: u32,
    ) -> Self {
        let mut index = PieceIndex {
            transitions: FxHashMap::default(),
            terminal: vec![None],
            scores,
            unk_id,
            max_piece_chars: 0,
        };
        for (surface, id) in entries {
            let mut node = 0u32;
            let mut len = 0;
            for c in surface.chars() {
                len += 1;
                let next = index.terminal.len() as u32;
                node = *index.transitions.entry((node, c)).or_insert_with(|| next);
                if node == next {
                    index.terminal.push(None);
                }
            }
            index.terminal[node as usize] = Some(id);
            index.max_piece_chars = index.max_piece_chars.max(len);
        }
        index
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn score(&self, id: u32) -> f64 {
        self.scores[id as usize]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn set_scores(&mut self, scores: Vec<f64>) {
        debug_assert_eq!(scores.len(), self.scores.len());
        self.scores = scores;
    }

    pub fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Calls `f(len, id)` for every indexed piece that is a prefix of
    /// `chars`, shortest first, up to `max_len` characters.
    #[inline]
    pub fn for_each_prefix(&self, chars: &[char], max_len: usize, mut f: impl FnMut(usize, u32)) {
        let mut node = 0u32;
        for (k, c) in chars.iter().take(max_len).enumerate() {
            match self.transitions.get(&(node, *c)) {
                Some(&next) => node = next,
                None => return,
            }
            if let Some(id) = self.terminal[node as usize] {
                f(k + 1, id);
            }
        }
    }

    pub fn get(&self, surface: &str) -> Option<u32> {
        let mut node = 0u32;
        for c in surface.chars() {
            node = *self.transitions.get(&(node, c))?;
        }
        self.terminal[node as usize]
    }
}

/// An immutable vocabulary with dense ids `0..len()`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    ids: HashMap<String, u32>,
    char_ids: FxHashMap<char, u32>,
    index: PieceIndex,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.pieces.len() == other.pieces.len()
            && self.pieces.iter().zip(&other.pieces).all(|(a, b)| {
                a.surface == b.surface
                    && a.kind == b.kind
                    && a.log_prob.to_bits() == b.log_prob.to_bits()
            })
    }
}

impl Vocabulary {
    /// Validates a full piece list (specials included) and indexes it.
    pub fn from_pieces(pieces: Vec<Piece>) -> Result<Self> {
        for (i, expected) in SPECIAL_SURFACES.iter().enumerate() {
            match pieces.get(i) {
                Some(p) if p.kind == PieceKind::Special && p.surface == *expected => {
                    if p.log_prob != 0.0 {
                        return Err(Error::format(
                            format!("line {}", i + 1),
                            "special tokens must have log_prob 0",
                        ));
                    }
                }
                _ => {
                    return Err(Error::NonContiguousSpecials {
                        line: i + 1,
                        expected: expected.to_string(),
                    })
                }
            }
        }

        let mut ids = HashMap::with_capacity(pieces.len());
        let mut char_ids = FxHashMap::default();
        for (i, p) in pieces.iter().enumerate() {
            let line = i + 1;
            let n = p.char_len();
            match p.kind {
                PieceKind::Special if i >= NUM_SPECIALS => {
                    return Err(Error::format(
                        format!("line {line}"),
                        "special tokens are only allowed on lines 1-5",
                    ))
                }
                PieceKind::Special => {}
                PieceKind::Char | PieceKind::Word => {
                    if (p.kind == PieceKind::Char) != (n == 1) || n == 0 {
                        return Err(Error::format(
                            format!("line {line}"),
                            format!("kind {} does not match surface {:?}", p.kind, p.surface),
                        ));
                    }
                    if p.log_prob.is_nan() || p.log_prob > 0.0 {
                        return Err(Error::format(
                            format!("line {line}"),
                            format!("log_prob {} must be <= 0", p.log_prob),
                        ));
                    }
                    if p.surface.contains(['\t', '\n']) {
                        return Err(Error::format(
                            format!("line {line}"),
                            "surface contains a tab or newline",
                        ));
                    }
                }
            }
            if ids.insert(p.surface.clone(), i as u32).is_some() {
                return Err(Error::DuplicateSurface {
                    surface: p.surface.clone(),
                    line,
                });
            }
            if let Some(c) = p.as_char() {
                char_ids.insert(c, i as u32);
            }
        }

        let index = PieceIndex::new(
            pieces
                .iter()
                .enumerate()
                .filter(|(_, p)| p.kind != PieceKind::Special)
                .map(|(i, p)| (p.surface.as_str(), i as u32)),
            pieces.iter().map(|p| p.log_prob).collect(),
            UNK_ID,
        );

        Ok(Vocabulary {
            pieces,
            ids,
            char_ids,
            index,
        })
    }

    /// Prepends the five specials to `pieces`, keeping the given order.
    pub fn with_specials(pieces: impl IntoIterator<Item = Piece>) -> Result<Self> {
        let all = SPECIAL_SURFACES
            .iter()
            .map(|s| Piece::special(*s))
            .chain(pieces)
            .collect();
        Self::from_pieces(all)
    }

    /// Selects the final vocabulary from scored candidates.
    ///
    /// Every character in `required_chars` is kept; the remaining slots go to
    /// the best-ranked other candidates. Retained log-probabilities are
    /// renormalized to sum to one. When there are not enough candidates the
    /// vocabulary is smaller than `target_size`.
    pub fn build_final(
        candidates: &[Piece],
        target_size: usize,
        required_chars: &BTreeSet<char>,
    ) -> Result<Self> {
        let forced = NUM_SPECIALS + required_chars.len();
        if target_size < forced {
            return Err(Error::TargetTooSmall {
                target: target_size,
                required: forced,
            });
        }

        let mut best: HashMap<&str, &Piece> = HashMap::new();
        for p in candidates {
            if p.kind == PieceKind::Special || SPECIAL_SURFACES.contains(&p.surface.as_str()) {
                continue;
            }
            best.entry(p.surface.as_str())
                .and_modify(|cur| {
                    if p.log_prob > cur.log_prob {
                        *cur = p;
                    }
                })
                .or_insert(p);
        }

        let mut retained: Vec<Piece> = Vec::with_capacity(target_size);
        let mut buf = [0u8; 4];
        for &c in required_chars {
            let s: &str = c.encode_utf8(&mut buf);
            match best.remove(s) {
                Some(p) => retained.push(p.clone()),
                None => return Err(Error::MissingRequiredChar(c)),
            }
        }

        let mut rest: Vec<&Piece> = best.into_values().collect();
        rest.sort_by(|a, b| rank_order(&a.surface, a.log_prob, &b.surface, b.log_prob));
        retained.extend(rest.into_iter().take(target_size - forced).cloned());
        retained.sort_by(|a, b| rank_order(&a.surface, a.log_prob, &b.surface, b.log_prob));

        let norm = log_sum_exp(retained.iter().map(|p| p.log_prob));
        if norm.is_finite() {
            for p in &mut retained {
                p.log_prob = (p.log_prob - norm).min(0.0);
            }
        }
        Self::with_specials(retained)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.ids.get(surface).copied()
    }

    pub fn char_id(&self, c: char) -> Option<u32> {
        self.char_ids.get(&c).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn index(&self) -> &PieceIndex {
        &self.index
    }

    /// Length in characters of the longest non-special piece.
    pub fn max_piece_chars(&self) -> usize {
        self.index.max_piece_chars()
    }

    pub fn word_count(&self) -> usize {
        self.pieces
            .iter()
            .filter(|p| p.kind == PieceKind::Word)
            .count()
    }

    pub fn char_count(&self) -> usize {
        self.char_ids.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pieces {
            out.push_str(&p.surface);
            out.push('\t');
            out.push_str(&format!("{:.16e}", p.log_prob));
            out.push('\t');
            out.push_str(p.kind.as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut ids: HashMap<&str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let loc = format!("line {line}");
            let mut fields = raw.split('\t');
            let (surface, lp, kind) =
                match (fields.next(), fields.next(), fields.next(), fields.next()) {
                    (Some(s), Some(lp), Some(k), None) => (s, lp, k),
                    _ => return Err(Error::format(loc, "expected surface<TAB>log_prob<TAB>kind")),
                };
            if surface.is_empty() {
                return Err(Error::format(loc, "empty surface"));
            }
            let log_prob: f64 = lp
                .parse()
                .map_err(|_| Error::format(&loc, format!("bad log_prob {lp:?}")))?;
            if !log_prob.is_finite() {
                return Err(Error::format(loc, format!("log_prob {lp} is not finite")));
            }
            let kind = PieceKind::parse(kind)
                .ok_or_else(|| Error::format(&loc, format!("unknown kind {kind:?}")))?;
            if ids.insert(surface, i).is_some() {
                return Err(Error::DuplicateSurface {
                    surface: surface.to_string(),
                    line,
                });
            }
            pieces.push(Piece {
                surface: surface.to_string(),
                log_prob,
                kind,
            });
        }
        Self::from_pieces(pieces)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| {
            let line = bytes[..e.valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count()
                + 1;
            Error::format(format!("{}: line {line}", path.display()), "invalid UTF-8")
        })?;
        Self::from_tsv(text)
    }

    /// SHA-256 of the canonical TSV serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
