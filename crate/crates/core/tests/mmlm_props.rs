mod common;

use common::{corpus_text, trained};
use mixtok::dataset::analyze_example;
use mixtok::mmlm::{generate, mask_budget, Action, MaskedSample, IGNORE_LABEL};
use mixtok::textnorm::normalize_str;
use mixtok::vocab::{Vocabulary, MASK_ID, NUM_SPECIALS, PAD_ID, SEP_ID};
use mixtok::{MaskingConfig, Task};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = MaskingConfig> {
    (
        0.0f64..=1.0,
        0.0f64..=1.0,
        4usize..160,
        any::<u64>(),
        prop::bool::ANY,
    )
        .prop_map(|(mask_rate, cmlm_rate, max_len, seed, mlm)| MaskingConfig {
            mask_rate,
            cmlm_rate,
            max_len,
            seed,
            task: if mlm { Task::Mlm } else { Task::Mmlm },
            ..MaskingConfig::default()
        })
}

/// Walks the original sequence alongside the example using the plan as
/// ground truth and checks every position.
fn check_alignment(s: &MaskedSample, vocab: &Vocabulary) -> Result<(), TestCaseError> {
    let ex = &s.example;
    let seq = &s.sequence.ids;
    let mut decisions = s.plan.decisions.iter().peekable();
    let mut at = 0;
    for (pos, &id) in seq.iter().enumerate() {
        let decision = match decisions.peek() {
            Some(d) if d.position == pos => decisions.next().map(|d| d.action),
            _ => None,
        };
        match decision {
            None => {
                prop_assert_eq!(ex.input_ids[at], id);
                prop_assert_eq!(ex.labels[at], IGNORE_LABEL);
                at += 1;
            }
            Some(Action::ExpandChars) if ex.labels[at] != id as i64 => {
                let surface = &vocab.piece(id).unwrap().surface;
                let n = surface.chars().count();
                prop_assert!(n >= 2);
                let labels: String = ex.labels[at..at + n]
                    .iter()
                    .map(|&l| vocab.piece(l as u32).unwrap().surface.as_str())
                    .collect();
                prop_assert_eq!(&labels, surface);
                prop_assert!(ex.input_ids[at..at + n].iter().all(|&i| i == MASK_ID));
                at += n;
            }
            Some(action) => {
                prop_assert_eq!(ex.labels[at], id as i64);
                match action {
                    Action::MaskWord | Action::ExpandChars => {
                        prop_assert_eq!(ex.input_ids[at], MASK_ID)
                    }
                    Action::Keep => prop_assert_eq!(ex.input_ids[at], id),
                    Action::RandomWord(r) => {
                        prop_assert!(r as usize >= NUM_SPECIALS && (r as usize) < vocab.len());
                        prop_assert_eq!(ex.input_ids[at], r);
                    }
                }
                at += 1;
            }
        }
    }
    let sep = ex.input_ids.iter().position(|&i| i == SEP_ID).unwrap();
    prop_assert_eq!(at, sep + 1);
    for p in sep + 1..ex.input_ids.len() {
        prop_assert_eq!(ex.input_ids[p], PAD_ID);
        prop_assert_eq!(ex.labels[p], IGNORE_LABEL);
        prop_assert_eq!(ex.attention[p], 0);
    }
    prop_assert!(ex.attention[..=sep].iter().all(|&a| a == 1));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn masking_invariants(text in corpus_text(), cfg in config(), ordinal in 0u64..1000) {
        let vocab = &trained().1;
        let text = normalize_str(&text);
        let s = generate(&text, vocab, &cfg, ordinal).unwrap();
        let ex = &s.example;
        prop_assert_eq!(ex.input_ids.len(), cfg.max_len);
        prop_assert_eq!(ex.labels.len(), cfg.max_len);
        prop_assert_eq!(ex.attention.len(), cfg.max_len);

        // spans: disjoint, inside the words, clipped draws
        let words = s.sequence.len() - 2;
        let mut covered = vec![false; s.sequence.len()];
        for sp in &s.spans {
            prop_assert!((1..=4).contains(&sp.drawn) && sp.len >= 1 && sp.len <= sp.drawn);
            for p in sp.start..sp.start + sp.len {
                prop_assert!(p >= 1 && p <= words);
                prop_assert!(!covered[p]);
                covered[p] = true;
            }
        }
        let count = covered.iter().filter(|&&c| c).count();
        let budget = mask_budget(cfg.mask_rate, words);
        prop_assert!(count >= budget.min(words));
        if let Some(last) = s.spans.last() {
            prop_assert!(count < budget + last.drawn);
        }

        for d in &s.plan.decisions {
            prop_assert!(covered[d.position]);
            if d.action == Action::ExpandChars {
                prop_assert_eq!(cfg.task, Task::Mmlm);
                prop_assert!(vocab.piece(s.sequence.ids[d.position]).unwrap().char_len() >= 2);
            }
        }
        prop_assert_eq!(s.plan.decisions.len(), count);

        // every [MASK] is labeled
        for (i, l) in ex.input_ids.iter().zip(&ex.labels) {
            if *i == MASK_ID {
                prop_assert!(*l != IGNORE_LABEL);
            }
        }
        check_alignment(&s, vocab)?;

        let analysis = analyze_example(ex, vocab);
        prop_assert_eq!(analysis.violations, 0);
        // expansions that would overflow are downgraded, so nothing is cut
        prop_assert_eq!(analysis.original_ids(), s.sequence.ids.clone());

        prop_assert_eq!(&generate(&text, vocab, &cfg, ordinal).unwrap(), &s);
    }
}
