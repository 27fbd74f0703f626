//! Vocabulary, skip-gram embedding training, and nearest-word lookup.

mod skipgram;
mod table;
mod vocab;

pub use skipgram::{corpus_pairs, skipgram_pairs, train_skipgram, SkipGramConfig, SkipGramOutcome};
pub use table::{sidecar_path, EmbeddingTable, Metric};
pub(crate) use table::Reader;
pub use vocab::{build_vocab, Vocabulary, END, END_ID, START, START_ID, UNK, UNK_ID};
