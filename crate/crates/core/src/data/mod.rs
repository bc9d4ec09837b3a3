//! Vocabulary, synthetic corpora, corpus transformations and batching.

mod batch;
mod corpus;
mod synthetic;
mod tsv;
mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{
    apply_no_overlap_tagging, build_english_centered_splits, strip_no_overlap_tagging, subsample_direction,
    DirectionKind, EnglishCenteredSplits, ParallelCorpus, SampleSize, SentencePair, Split,
};
pub use synthetic::{generate_synthetic_corpus, ReorderRule, SyntheticCorpus, SyntheticTask, SyntheticTaskSpec};
pub use tsv::{load_tsv_corpus, load_tsv_dir, tsv_file_name, write_tsv_corpus, VocabMode};
pub use vocab::{bos_token, Vocabulary, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
