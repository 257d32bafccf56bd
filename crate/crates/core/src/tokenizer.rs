//! Encoding text into mixed-granularity or character-only piece sequences.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeOptions};
use crate::textnorm::NormalizedText;
use crate::vocab::{Vocabulary, CLS_ID, SEP_ID, UNK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Viterbi segmentation over characters and words.
    Mixed,
    /// One piece per character.
    CharOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Mode::Mixed),
            "char" => Ok(Mode::CharOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown granularity {other:?} (expected mixed or char)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Mixed => "mixed",
            Mode::CharOnly => "char",
        })
    }
}

/// Piece ids with the character span each one covers. `[CLS]`/`[SEP]`
/// carry zero-width spans at the start and end of the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub mode: Mode,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_specials(&self) -> bool {
        self.ids.iter().any(|&id| id == CLS_ID || id == SEP_ID)
    }

    pub fn unk_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id == UNK_ID).count()
    }
}

pub fn encode(text: &NormalizedText, vocab: &Vocabulary, mode: Mode) -> TokenSequence {
    let opts = LatticeOptions {
        max_piece_len: vocab.max_piece_chars().max(1),
        ..LatticeOptions::default()
    };
    encode_with(text, vocab, mode, &opts)
}

pub fn encode_with(
    text: &NormalizedText,
    vocab: &Vocabulary,
    mode: Mode,
    opts: &LatticeOptions,
) -> TokenSequence {
    match mode {
        Mode::Mixed => {
            let chars: Vec<char> = text.as_str().chars().collect();
            let path = Lattice::build(&chars, vocab.index(), opts)
                .viterbi()
                .expect("lattice with UNK fallback is connected");
            TokenSequence {
                ids: path.piece_ids,
                spans: path.spans,
                mode,
            }
        }
        Mode::CharOnly => {
            let (ids, spans) = text
                .as_str()
                .chars()
                .enumerate()
                .map(|(i, c)| (vocab.char_id(c).unwrap_or(UNK_ID), (i, i + 1)))
                .unzip();
            TokenSequence { ids, spans, mode }
        }
    }
}

/// Concatenates the surfaces of all non-special pieces.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    decode_ids(&seq.ids, vocab)
}

pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let piece = vocab.piece(id).ok_or(Error::UnknownId(id))?;
        if !vocab.is_special(id) {
            out.push_str(&piece.surface);
        }
    }
    Ok(out)
}

/// Wraps the sequence in `[CLS] ... [SEP]`.
pub fn add_specials(seq: &TokenSequence) -> Result<TokenSequence> {
    if seq.has_specials() {
        return Err(Error::AlreadyHasSpecials);
    }
    let end = seq.spans.last().map_or(0, |s| s.1);
    let mut ids = Vec::with_capacity(seq.len() + 2);
    let mut spans = Vec::with_capacity(seq.len() + 2);
    ids.push(CLS_ID);
    spans.push((0, 0));
    ids.extend_from_slice(&seq.ids);
    spans.extend_from_slice(&seq.spans);
    ids.push(SEP_ID);
    spans.push((end, end));
    Ok(TokenSequence {
        ids,
        spans,
        mode: seq.mode,
    })
}
