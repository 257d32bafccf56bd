//! Prints a deterministic synthetic corpus: `synth_corpus <min_chars> [seed]`.

use std::io::{BufWriter, Write};

use mixtok::synth::{SynthConfig, SynthCorpus};

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let min_chars: usize = args
        .next()
        .and_then(|a| a.parse().ok())
        .unwrap_or(1_000_000);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut gen = SynthCorpus::new(SynthConfig {
        seed,
        ..SynthConfig::default()
    });
    let mut out = BufWriter::new(std::io::stdout().lock());
    for line in gen.lines_with_chars(min_chars) {
        writeln!(out, "{line}")?;
    }
    out.flush()
}
