//! Dataset ingestion, vocabulary, batching and task scheduling.

mod batch;
mod dataset;
mod schedule;
mod task;
mod vocab;

pub use batch::{
    batch_encoded, batch_in_order, collate, encode_examples, make_batches, Batch, EncodedExample,
    DEFAULT_MAX_LEN,
};
pub use dataset::{downsample, load_dataset, split_of, strip_labels, tokenize, Example, Split};
pub use schedule::{BatchCursor, TaskAlternator};
pub use task::{TaskDef, TaskSet, TaskSpec};
pub use vocab::{build_vocab, Vocab, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
