//! Corpus handling, segment batching, SGD training and perplexity.

mod batch;
mod eval;
mod train;
mod vocab;

pub use batch::{make_batches, Batch, BatchStream};
pub use eval::{evaluate_perplexity, evaluate_perplexity_batched, sequence_nll, unigram_perplexity};
pub use train::{train, LogRecord, Split, TrainConfig, TrainingLog};
pub use vocab::{build_vocab, Vocabulary, EOS, UNK};
