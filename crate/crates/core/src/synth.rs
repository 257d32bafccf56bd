//! Deterministic synthetic Chinese-like text for tests and benchmarks.
//!
//! Words are 1–4 CJK ideographs drawn from a fixed lexicon with Zipfian
//! frequencies, so a trained vocabulary has real multi-character words to find.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Real sentences mixed into the start of every generated corpus.
pub const FIXED_SENTENCES: [&str; 5] = [
    "他是一个爱调皮捣蛋的孩子。",
    "我们今天去公园散步。",
    "自然语言处理是人工智能的一个重要方向。",
    "这个模型在多个任务上取得了很好的效果。",
    "使用语言模型来预测下一个词的概率",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    pub lexicon_size: usize,
    /// Distinct ideographs words are built from.
    pub alphabet_size: usize,
    pub zipf_exponent: f64,
    /// Words per sentence.
    pub min_words: usize,
    pub max_words: usize,
    /// Sentences per line.
    pub min_sentences: usize,
    pub max_sentences: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            lexicon_size: 6000,
            alphabet_size: 2500,
            zipf_exponent: 1.05,
            min_words: 6,
            max_words: 28,
            min_sentences: 2,
            max_sentences: 8,
        }
    }
}

pub struct SynthCorpus {
    rng: ChaCha20Rng,
    lexicon: Vec<String>,
    word_dist: WeightedIndex<f64>,
    cfg: SynthConfig,
    emitted: usize,
}

impl SynthCorpus {
    pub fn new(cfg: SynthConfig) -> Self {
        assert!(cfg.lexicon_size > 0 && cfg.alphabet_size > 0);
        assert!(cfg.min_words >= 1 && cfg.min_words <= cfg.max_words);
        assert!(cfg.min_sentences >= 1 && cfg.min_sentences <= cfg.max_sentences);
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let alphabet: Vec<char> = (0..cfg.alphabet_size as u32)
            .map(|i| char::from_u32(0x4E00 + i).expect("CJK block"))
            .collect();
        // frequent characters recur across many words, as in real text
        let char_dist = zipf(alphabet.len(), 0.8);
        let len_dist = WeightedIndex::new([30.0, 50.0, 12.0, 8.0]).expect("weights");
        let mut seen = std::collections::HashSet::new();
        let mut lexicon = Vec::with_capacity(cfg.lexicon_size);
        while lexicon.len() < cfg.lexicon_size {
            let len = 1 + len_dist.sample(&mut rng);
            let word: String = (0..len)
                .map(|_| alphabet[char_dist.sample(&mut rng)])
                .collect();
            if seen.insert(word.clone()) {
                lexicon.push(word);
            }
        }
        let word_dist = zipf(lexicon.len(), cfg.zipf_exponent);
        SynthCorpus {
            rng,
            lexicon,
            word_dist,
            cfg,
            emitted: 0,
        }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    fn paragraph(&mut self) -> String {
        let n = self
            .rng
            .gen_range(self.cfg.min_sentences..=self.cfg.max_sentences);
        let mut s = String::new();
        for _ in 0..n {
            self.sentence(&mut s);
        }
        s
    }

    fn sentence(&mut self, s: &mut String) {
        let n = self.rng.gen_range(self.cfg.min_words..=self.cfg.max_words);
        for i in 0..n {
            s.push_str(&self.lexicon[self.word_dist.sample(&mut self.rng)]);
            if i + 1 < n && self.rng.gen_bool(0.08) {
                s.push('，');
            }
        }
        s.push('。');
    }

    /// Lines until at least `min_chars` characters have been produced.
    pub fn lines_with_chars(&mut self, min_chars: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut total = 0;
        while total < min_chars {
            let line = self.next().expect("infinite");
            total += line.chars().count();
            out.push(line);
        }
        out
    }
}

impl Iterator for SynthCorpus {
    type Item = String;

    fn next(&mut self) -> Option<String> {
        let line = match FIXED_SENTENCES.get(self.emitted) {
            Some(s) => s.to_string(),
            None => self.paragraph(),
        };
        self.emitted += 1;
        Some(line)
    }
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
}

/// `n` lines from the default generator with the given seed.
pub fn corpus(seed: u64, n: usize) -> Vec<String> {
    SynthCorpus::new(SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .take(n)
    .collect()
}
