//! Tokenization, corpus and pair-dataset readers, and checkpoint persistence.

mod bpe;
mod checkpoint;
mod corpus;
mod pairs;
mod vocab;

pub use bpe::{Tokenizer, WordMarker};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use corpus::{read_corpus, Corpus, CorpusReader, CorpusStats, DEFAULT_MAX_LEN};
pub use pairs::{load_pairs, PairDataset, PairRow};
pub use vocab::{MergeTable, Vocab};
