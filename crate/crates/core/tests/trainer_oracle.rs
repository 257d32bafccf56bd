mod common;

use std::collections::BTreeSet;

use common::{normalized, toy_text};
use mixtok::lattice::{enumerate_segmentations, LatticeOptions};
use mixtok::synth;
use mixtok::textnorm::{normalize_str, NormalizedText};
use mixtok::tokenizer::{encode, Mode};
use mixtok::trainer::{em_step, prune, pruning_losses, seed_vocabulary, train, CandidateSet};
use mixtok::vocab::{Piece, Vocabulary};
use mixtok::TrainerConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corpus log-likelihood under the best segmentation of every line, by
/// exhaustive enumeration, with the candidates `skip` removed.
fn enumerated_viterbi_ll(
    corpus: &[NormalizedText],
    cands: &CandidateSet,
    skip: Option<&str>,
    opts: &LatticeOptions,
) -> f64 {
    let pieces: Vec<Piece> = cands
        .iter()
        .filter(|(s, _)| Some(*s) != skip)
        .map(|(s, lp)| Piece::new(s, lp))
        .collect();
    let vocab = Vocabulary::with_specials(pieces).unwrap();
    corpus
        .iter()
        .map(|line| {
            enumerate_segmentations(line, &vocab, opts)
                .unwrap()
                .iter()
                .map(|p| p.score)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

#[test]
fn em_log_likelihood_never_decreases() {
    let corpus = normalized(&synth::corpus(7, 300));
    let cfg = TrainerConfig::with_target(800);
    let opts = LatticeOptions::default();
    let mut cands = seed_vocabulary(&corpus, &cfg).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..6 {
        let (lps, ll) = em_step(&corpus, &cands, &opts);
        assert!(ll >= prev - 1e-6 * prev.abs(), "{ll} < {prev}");
        prev = ll;
        cands = cands.with_log_probs(lps);
    }
}

/// 8 protected characters and 50 two-character words, each line a single
/// word. Rerouting a word then costs exactly what deleting it costs, so the
/// approximate losses must equal the leave-one-out oracle.
#[test]
fn prune_matches_leave_one_out_on_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chars: Vec<char> = "abcdefgh".chars().collect();
    let mut entries: Vec<(String, f64)> = chars.iter().map(|c| (c.to_string(), -3.0)).collect();
    let mut words = BTreeSet::new();
    while words.len() < 50 {
        let w: String = (0..2)
            .map(|_| chars[rng.gen_range(0..chars.len())])
            .collect();
        words.insert(w);
    }
    let mut lines = Vec::new();
    for w in &words {
        // below -6 the two characters beat the word and it goes unused
        entries.push((w.clone(), rng.gen_range(-8.0..-1.0)));
        for _ in 0..rng.gen_range(1..6) {
            lines.push(w.clone());
        }
    }
    let corpus = normalized(&lines);
    let cands = CandidateSet::new(entries);
    let opts = LatticeOptions::default();
    let protected: BTreeSet<String> = chars.iter().map(|c| c.to_string()).collect();

    let full = enumerated_viterbi_ll(&corpus, &cands, None, &opts);
    let approx = pruning_losses(&corpus, &cands, &opts);
    let mut oracle: Vec<(f64, f64, String)> = Vec::new();
    for (i, (s, lp)) in cands.iter().enumerate() {
        if protected.contains(s) {
            continue;
        }
        let loss = full - enumerated_viterbi_ll(&corpus, &cands, Some(s), &opts);
        assert!(
            (approx[i] - loss).abs() <= 1e-9,
            "{s}: {} vs {loss}",
            approx[i]
        );
        oracle.push((loss, lp, s.to_string()));
    }
    assert!(
        oracle.iter().any(|o| o.0 == 0.0),
        "fixture should contain unused words"
    );

    // keep the largest losses; ties go to higher probability, then code points
    oracle.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(b.1.partial_cmp(&a.1).unwrap())
            .then(a.2.cmp(&b.2))
    });
    let keep = (0.75f64 * 50.0).ceil() as usize;
    let expected_removed: BTreeSet<String> = oracle[keep..].iter().map(|o| o.2.clone()).collect();

    let pruned = prune(&corpus, &cands, 0.75, &protected, &opts);
    let kept: BTreeSet<&str> = pruned.iter().map(|(s, _)| s).collect();
    let removed: BTreeSet<String> = cands
        .iter()
        .map(|(s, _)| s)
        .filter(|s| !kept.contains(s))
        .map(String::from)
        .collect();
    assert_eq!(removed.len(), 12);
    assert_eq!(removed, expected_removed);
    assert!(protected.iter().all(|c| kept.contains(c.as_str())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Rerouting is one feasible alternative, so it never underestimates the
    /// true leave-one-out loss.
    #[test]
    fn approximate_loss_bounds_exact_loss(
        lines in prop::collection::vec(toy_text(8), 1..12),
        words in prop::collection::btree_map("[abc]{2,3}", -6.0f64..-0.5, 1..10),
    ) {
        let mut entries: Vec<(String, f64)> = ["a", "b", "c"].iter().map(|c| (c.to_string(), -1.5)).collect();
        entries.extend(words);
        let cands = CandidateSet::new(entries);
        let corpus: Vec<NormalizedText> = lines.iter().map(|l| normalize_str(l)).collect();
        let opts = LatticeOptions { max_piece_len: 3, ..LatticeOptions::default() };
        let approx = pruning_losses(&corpus, &cands, &opts);
        let full = enumerated_viterbi_ll(&corpus, &cands, None, &opts);
        for (i, (s, _)) in cands.iter().enumerate().skip(3) {
            let exact = full - enumerated_viterbi_ll(&corpus, &cands, Some(s), &opts);
            prop_assert!(approx[i] >= exact - 1e-9, "{}: approx {} < exact {}", s, approx[i], exact);
        }
    }
}

#[test]
fn train_contract_and_thread_independence() {
    let lines: Vec<String> = synth::SynthCorpus::new(synth::SynthConfig {
        seed: 11,
        alphabet_size: 300,
        lexicon_size: 1500,
        ..synth::SynthConfig::default()
    })
    .take(400)
    .collect();
    let corpus = normalized(&lines);
    let cfg = TrainerConfig::with_target(600);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&corpus, &cfg).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.to_tsv(), four.to_tsv());
    assert_eq!(one.len(), 600);
    assert!(one.word_count() > 0);
    for line in &corpus {
        assert_eq!(encode(line, &one, Mode::Mixed).unk_count(), 0);
        for c in line.as_str().chars() {
            assert!(one.char_id(c).is_some(), "{c} lost");
        }
    }
}
