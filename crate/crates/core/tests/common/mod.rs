#![allow(dead_code)]

use mixtok::textnorm::{normalize_str, NormalizedText};
use mixtok::vocab::{Piece, Vocabulary};
use proptest::prelude::*;

pub const ALPHABET: [char; 3] = ['a', 'b', 'c'];

/// Every string of length 1..=3 over the toy alphabet.
pub fn toy_surfaces() -> Vec<String> {
    let mut out = Vec::new();
    let mut layer = vec![String::new()];
    for _ in 0..3 {
        layer = layer
            .iter()
            .flat_map(|p| ALPHABET.iter().map(move |c| format!("{p}{c}")))
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

/// A random subset of the toy surfaces with random log-probabilities.
/// Characters may be missing, which exercises the unknown-character edge.
pub fn toy_vocab() -> impl Strategy<Value = Vocabulary> {
    let n = toy_surfaces().len();
    prop::collection::vec((prop::bool::weighted(0.6), -6.0f64..-0.05), n).prop_map(|picks| {
        let pieces: Vec<Piece> = toy_surfaces()
            .into_iter()
            .zip(picks)
            .filter(|(_, (keep, _))| *keep)
            .map(|(s, (_, lp))| Piece::new(s, lp))
            .collect();
        Vocabulary::with_specials(pieces).expect("distinct surfaces")
    })
}

pub fn toy_text(max_len: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(ALPHABET.to_vec()), 0..=max_len)
        .prop_map(|cs| cs.into_iter().collect())
}

/// All strings over the toy alphabet of length `0..=max_len`.
pub fn all_toy_texts(max_len: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    let mut layer = vec![String::new()];
    for _ in 0..max_len {
        layer = layer
            .iter()
            .flat_map(|p| ALPHABET.iter().map(move |c| format!("{p}{c}")))
            .collect();
        out.extend(layer.iter().cloned());
    }
    out
}

pub fn normalized(lines: &[String]) -> Vec<NormalizedText> {
    lines.iter().map(|l| normalize_str(l)).collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// A small mixed vocabulary trained once per test binary, and its corpus.
pub fn trained() -> &'static (Vec<String>, Vocabulary) {
    use std::sync::OnceLock;
    static CELL: OnceLock<(Vec<String>, Vocabulary)> = OnceLock::new();
    CELL.get_or_init(|| {
        let lines: Vec<String> = mixtok::synth::SynthCorpus::new(mixtok::synth::SynthConfig {
            seed: 3,
            alphabet_size: 300,
            lexicon_size: 1500,
            ..mixtok::synth::SynthConfig::default()
        })
        .take(300)
        .collect();
        let vocab = mixtok::trainer::train(
            &normalized(&lines),
            &mixtok::TrainerConfig::with_target(700),
        )
        .expect("training succeeds");
        (lines, vocab)
    })
}

/// A corpus line, or a slice of one (which may end mid-word).
pub fn corpus_text() -> impl Strategy<Value = String> {
    let n = trained().0.len();
    (
        0..n,
        any::<prop::sample::Index>(),
        any::<prop::sample::Index>(),
    )
        .prop_map(|(i, a, b)| {
            let chars: Vec<char> = trained().0[i].chars().collect();
            let (a, b) = (a.index(chars.len() + 1), b.index(chars.len() + 1));
            chars[a.min(b)..a.max(b)].iter().collect()
        })
}
