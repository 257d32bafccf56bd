//! Segmentation lattices over character positions.
//!
//! Edges are in-vocabulary substrings scored by their log-probability. A path
//! from 0 to `len` is one segmentation and its score is the sum of its edges.
//! All probability arithmetic is done in log space.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::textnorm::NormalizedText;
use crate::vocab::{PieceIndex, Vocabulary};

/// Longest text [`enumerate_segmentations`] accepts.
pub const MAX_ENUMERATION_CHARS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeOptions {
    pub max_piece_len: usize,
    /// Score of the span-1 edge inserted where no character piece exists.
    pub unk_penalty: f64,
}

impl Default for LatticeOptions {
    fn default() -> Self {
        LatticeOptions {
            max_piece_len: 8,
            unk_penalty: -20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub begin: usize,
    pub end: usize,
    pub piece_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub piece_ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
    pub score: f64,
}

impl PathResult {
    pub fn empty() -> Self {
        PathResult {
            piece_ids: Vec::new(),
            spans: Vec::new(),
            score: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    pub counts: BTreeMap<u32, f64>,
    pub total_log_likelihood: f64,
}

/// Edges grouped by begin position; within a position longer edges come first.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    len: usize,
    edges: Vec<Edge>,
    starts: Vec<usize>,
}

pub fn build_lattice(text: &NormalizedText, vocab: &Vocabulary, opts: &LatticeOptions) -> Lattice {
    let chars: Vec<char> = text.as_str().chars().collect();
    Lattice::build(&chars, vocab.index(), opts)
}

impl Lattice {
    pub fn build(chars: &[char], index: &PieceIndex, opts: &LatticeOptions) -> Self {
        let len = chars.len();
        let mut edges = Vec::with_capacity(len * 2);
        let mut starts = Vec::with_capacity(len + 1);
        let mut found: Vec<(usize, u32)> = Vec::with_capacity(opts.max_piece_len);
        for begin in 0..len {
            starts.push(edges.len());
            found.clear();
            index.for_each_prefix(&chars[begin..], opts.max_piece_len, |l, id| {
                found.push((l, id))
            });
            if found.first().is_none_or(|&(l, _)| l != 1) {
                found.insert(0, (1, index.unk_id()));
            }
            for &(l, id) in found.iter().rev() {
                let score = if id == index.unk_id() {
                    opts.unk_penalty
                } else {
                    index.score(id)
                };
                edges.push(Edge {
                    begin,
                    end: begin + l,
                    piece_id: id,
                    score,
                });
            }
        }
        starts.push(edges.len());
        Lattice { len, edges, starts }
    }

    /// Builds a lattice from arbitrary edges, e.g. to test a modified graph.
    pub fn from_edges(len: usize, mut edges: Vec<Edge>) -> Result<Self> {
        for e in &edges {
            if e.begin >= e.end || e.end > len {
                return Err(Error::format(
                    "lattice",
                    format!("edge [{}, {}) outside 0..{len}", e.begin, e.end),
                ));
            }
        }
        edges.sort_by(|a, b| a.begin.cmp(&b.begin).then(b.end.cmp(&a.end)));
        let mut starts = Vec::with_capacity(len + 1);
        let mut i = 0;
        for p in 0..=len {
            while i < edges.len() && edges[i].begin < p {
                i += 1;
            }
            starts.push(i);
        }
        Ok(Lattice { len, edges, starts })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edges_from(&self, begin: usize) -> &[Edge] {
        &self.edges[self.starts[begin]..self.starts[begin + 1]]
    }

    pub fn without_edge(&self, idx: usize) -> Self {
        let mut edges = self.edges.clone();
        edges.remove(idx);
        Lattice::from_edges(self.len, edges).expect("subset of valid edges")
    }

    /// Maximum-score segmentation. Among equal scores the path with fewer
    /// pieces wins; remaining ties keep the path whose last edge starts
    /// earliest, i.e. the longest final edge.
    pub fn viterbi(&self) -> Result<PathResult> {
        let n = self.len;
        if n == 0 {
            return Ok(PathResult::empty());
        }
        let mut score = vec![f64::NEG_INFINITY; n + 1];
        let mut pieces = vec![usize::MAX; n + 1];
        let mut back = vec![usize::MAX; n + 1];
        score[0] = 0.0;
        pieces[0] = 0;
        for p in 0..n {
            if pieces[p] == usize::MAX {
                continue;
            }
            for (k, e) in self.edges_from(p).iter().enumerate() {
                let cand = score[p] + e.score;
                let cand_n = pieces[p] + 1;
                let better = pieces[e.end] == usize::MAX
                    || cand > score[e.end]
                    || (cand == score[e.end] && cand_n < pieces[e.end]);
                if better {
                    score[e.end] = cand;
                    pieces[e.end] = cand_n;
                    back[e.end] = self.starts[p] + k;
                }
            }
        }
        if pieces[n] == usize::MAX {
            return Err(Error::Disconnected { len: n });
        }
        let mut piece_ids = Vec::with_capacity(pieces[n]);
        let mut spans = Vec::with_capacity(pieces[n]);
        let mut pos = n;
        while pos > 0 {
            let e = &self.edges[back[pos]];
            piece_ids.push(e.piece_id);
            spans.push((e.begin, e.end));
            pos = e.begin;
        }
        piece_ids.reverse();
        spans.reverse();
        Ok(PathResult {
            piece_ids,
            spans,
            score: score[n],
        })
    }

    fn alpha_beta(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len;
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for p in 0..n {
            if alpha[p] == f64::NEG_INFINITY {
                continue;
            }
            for e in self.edges_from(p) {
                alpha[e.end] = log_add(alpha[e.end], alpha[p] + e.score);
            }
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for p in (0..n).rev() {
            let mut acc = f64::NEG_INFINITY;
            for e in self.edges_from(p) {
                acc = log_add(acc, e.score + beta[e.end]);
            }
            beta[p] = acc;
        }
        (alpha, beta)
    }

    /// Log of the summed probability of all paths, and expected piece usage
    /// under the path posterior.
    pub fn forward_backward(&self) -> ExpectedCounts {
        let mut counts = BTreeMap::new();
        let total_log_likelihood = self.visit_posteriors(|id, p| {
            *counts.entry(id).or_insert(0.0) += p;
        });
        ExpectedCounts {
            counts,
            total_log_likelihood,
        }
    }

    /// Adds expected counts into a dense array (ids outside it are skipped)
    /// and returns the log-likelihood.
    pub fn accumulate_expected_counts(&self, counts: &mut [f64]) -> f64 {
        self.visit_posteriors(|id, p| {
            if let Some(c) = counts.get_mut(id as usize) {
                *c += p;
            }
        })
    }

    fn visit_posteriors(&self, mut f: impl FnMut(u32, f64)) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        let (alpha, beta) = self.alpha_beta();
        let z = alpha[self.len];
        if z == f64::NEG_INFINITY {
            return z;
        }
        for e in &self.edges {
            let lp = alpha[e.begin] + e.score + beta[e.end] - z;
            if lp > f64::NEG_INFINITY {
                f(e.piece_id, lp.exp());
            }
        }
        z
    }
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Every complete segmentation of `text`, found by exhaustive search over
/// substrings. This is a test oracle and does not use [`Lattice`].
pub fn enumerate_segmentations(
    text: &NormalizedText,
    vocab: &Vocabulary,
    opts: &LatticeOptions,
) -> Result<Vec<PathResult>> {
    let chars: Vec<char> = text.as_str().chars().collect();
    if chars.len() > MAX_ENUMERATION_CHARS {
        return Err(Error::TextTooLong {
            len: chars.len(),
            max: MAX_ENUMERATION_CHARS,
        });
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    enumerate_from(&chars, 0, vocab, opts, &mut current, &mut out);
    Ok(out)
}

fn enumerate_from(
    chars: &[char],
    pos: usize,
    vocab: &Vocabulary,
    opts: &LatticeOptions,
    current: &mut Vec<(u32, usize, usize, f64)>,
    out: &mut Vec<PathResult>,
) {
    if pos == chars.len() {
        out.push(PathResult {
            piece_ids: current.iter().map(|e| e.0).collect(),
            spans: current.iter().map(|e| (e.1, e.2)).collect(),
            score: current.iter().fold(0.0, |acc, e| acc + e.3),
        });
        return;
    }
    let lookup = |s: &str| vocab.id_of(s).filter(|&id| !vocab.is_special(id));
    let mut steps = Vec::new();
    for len in 1..=opts.max_piece_len.min(chars.len() - pos) {
        let s: String = chars[pos..pos + len].iter().collect();
        if let Some(id) = lookup(&s) {
            steps.push((id, len, vocab.pieces()[id as usize].log_prob));
        } else if len == 1 {
            steps.push((crate::vocab::UNK_ID, 1, opts.unk_penalty));
        }
    }
    for (id, len, score) in steps {
        current.push((id, pos, pos + len, score));
        enumerate_from(chars, pos + len, vocab, opts, current, out);
        current.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::normalize_str;
    use crate::vocab::{Piece, UNK_ID};

    fn toy() -> Vocabulary {
        Vocabulary::with_specials([
            Piece::new("a", -1.0),
            Piece::new("b", -1.2),
            Piece::new("c", -1.1),
            Piece::new("ab", -1.5),
            Piece::new("bc", -1.8),
        ])
        .unwrap()
    }

    fn opts(max_piece_len: usize) -> LatticeOptions {
        LatticeOptions {
            max_piece_len,
            ..Default::default()
        }
    }

    #[test]
    fn empty_text() {
        let l = build_lattice(&normalize_str(""), &toy(), &opts(8));
        assert!(l.is_empty());
        assert!(l.edges().is_empty());
        assert_eq!(l.viterbi().unwrap(), PathResult::empty());
        let fb = l.forward_backward();
        assert!(fb.counts.is_empty());
        assert_eq!(fb.total_log_likelihood, 0.0);
    }

    #[test]
    fn abc_has_five_edges() {
        // substrings of length <= 2 in vocab: a, b, c, ab, bc
        let l = build_lattice(&normalize_str("abc"), &toy(), &opts(2));
        let mut spans: Vec<(usize, usize)> = l.edges().iter().map(|e| (e.begin, e.end)).collect();
        spans.sort();
        assert_eq!(spans, [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]);
        for e in l.edges() {
            let surface: String = "abc".chars().skip(e.begin).take(e.end - e.begin).collect();
            assert_eq!(toy().id_of(&surface), Some(e.piece_id));
        }
    }

    #[test]
    fn max_piece_len_limits_edges() {
        let l = build_lattice(&normalize_str("abc"), &toy(), &opts(1));
        assert_eq!(l.edges().len(), 3);
    }

    #[test]
    fn unknown_char_gets_unk_edge() {
        let l = build_lattice(&normalize_str("azb"), &toy(), &opts(8));
        let unk: Vec<&Edge> = l.edges().iter().filter(|e| e.piece_id == UNK_ID).collect();
        assert_eq!(unk.len(), 1);
        assert_eq!((unk[0].begin, unk[0].end, unk[0].score), (1, 2, -20.0));
        let path = l.viterbi().unwrap();
        assert_eq!(path.piece_ids, [5, UNK_ID, 6]);
    }

    #[test]
    fn viterbi_abc() {
        // a|b|c = -3.3, ab|c = -2.6, a|bc = -2.8
        let path = build_lattice(&normalize_str("abc"), &toy(), &opts(8))
            .viterbi()
            .unwrap();
        assert_eq!(path.piece_ids, [8, 7]);
        assert_eq!(path.spans, [(0, 2), (2, 3)]);
        assert!((path.score - -2.6).abs() < 1e-12);
    }

    #[test]
    fn viterbi_single_char() {
        let path = build_lattice(&normalize_str("b"), &toy(), &opts(8))
            .viterbi()
            .unwrap();
        assert_eq!(path.piece_ids, [6]);
        assert_eq!(path.score, -1.2);
    }

    #[test]
    fn viterbi_prefers_fewer_pieces_on_tie() {
        let v = Vocabulary::with_specials([
            Piece::new("a", -1.0),
            Piece::new("b", -1.0),
            Piece::new("ab", -2.0),
        ])
        .unwrap();
        let path = build_lattice(&normalize_str("ab"), &v, &opts(8))
            .viterbi()
            .unwrap();
        assert_eq!(path.piece_ids, [7]);
    }

    #[test]
    fn disconnected_lattice() {
        let l = Lattice::from_edges(
            2,
            vec![Edge {
                begin: 0,
                end: 1,
                piece_id: 5,
                score: -1.0,
            }],
        )
        .unwrap();
        assert!(matches!(l.viterbi(), Err(Error::Disconnected { len: 2 })));
        assert_eq!(l.forward_backward().total_log_likelihood, f64::NEG_INFINITY);
    }

    #[test]
    fn forward_backward_abc() {
        let fb = build_lattice(&normalize_str("abc"), &toy(), &opts(8)).forward_backward();
        let paths = [-2.6f64, -2.8, -3.3];
        let z: f64 = paths.iter().map(|s| s.exp()).sum();
        assert!((fb.total_log_likelihood - z.ln()).abs() < 1e-12);
        let p_ab_c = (-2.6f64).exp() / z;
        assert!((p_ab_c - 0.432).abs() < 1e-3);
        assert!((fb.counts[&8] - p_ab_c).abs() < 1e-12);
        // 'a' is used by a|bc and a|b|c
        let p_a = ((-2.8f64).exp() + (-3.3f64).exp()) / z;
        assert!((fb.counts[&5] - p_a).abs() < 1e-12);
        // c appears in two of three paths
        assert!((fb.counts[&7] - ((-2.6f64).exp() + (-3.3f64).exp()) / z).abs() < 1e-12);
    }

    #[test]
    fn single_segmentation_gives_integer_counts() {
        let v = Vocabulary::with_specials([Piece::new("a", -0.5), Piece::new("b", -2.0)]).unwrap();
        let l = build_lattice(&normalize_str("abaa"), &v, &opts(8));
        let fb = l.forward_backward();
        assert!((fb.counts[&5] - 3.0).abs() < 1e-12);
        assert!((fb.counts[&6] - 1.0).abs() < 1e-12);
        assert!((fb.total_log_likelihood - (-3.5)).abs() < 1e-12);
    }

    #[test]
    fn enumeration_abc() {
        let paths = enumerate_segmentations(&normalize_str("abc"), &toy(), &opts(8)).unwrap();
        assert_eq!(paths.len(), 3);
        let mut ids: Vec<Vec<u32>> = paths.into_iter().map(|p| p.piece_ids).collect();
        ids.sort();
        assert_eq!(ids, vec![vec![5, 6, 7], vec![5, 9], vec![8, 7]]);
    }

    #[test]
    fn enumeration_edge_cases() {
        let empty = enumerate_segmentations(&normalize_str(""), &toy(), &opts(8)).unwrap();
        assert_eq!(empty, vec![PathResult::empty()]);
        let long = normalize_str(&"a".repeat(17));
        assert!(matches!(
            enumerate_segmentations(&long, &toy(), &opts(8)),
            Err(Error::TextTooLong { len: 17, max: 16 })
        ));
    }
}
