//! Mixed-granularity tokenization and masked-LM pre-training data.
//!
//! The pipeline runs in stages:
//!
//! 1. [`textnorm`] turns raw UTF-8 lines into [`NormalizedText`].
//! 2. [`trainer`] learns a unigram language model over characters and
//!    multi-character words and emits a [`Vocabulary`].
//! 3. [`tokenizer`] segments text with Viterbi over a [`lattice`], either
//!    into mixed character/word pieces or into characters only.
//! 4. [`mmlm`] corrupts token sequences with n-gram word masking, optionally
//!    expanding masked words into one `[MASK]` per character.
//! 5. [`dataset`] writes fixed-length examples to JSON-lines shards and
//!    recomputes masking statistics from them.

pub mod dataset;
pub mod error;
pub mod lattice;
pub mod mmlm;
pub mod synth;
pub mod textnorm;
pub mod tokenizer;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use lattice::{ExpectedCounts, Lattice, LatticeOptions, PathResult};
pub use mmlm::{Action, MaskingConfig, MaskingPlan, Task, TrainingExample};
pub use textnorm::NormalizedText;
pub use tokenizer::{Mode, TokenSequence};
pub use trainer::TrainerConfig;
pub use vocab::{Piece, PieceKind, Vocabulary};
