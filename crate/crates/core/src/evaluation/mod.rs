//! Greedy and pivot decoding, BLEU, and off-target measurement.

mod bleu;
mod decode;
mod offtarget;
mod report;

pub use bleu::{bleu_from_stats, corpus_bleu, ngram_stats, Smoothing};
pub use decode::{default_max_len, greedy_decode, greedy_decode_batch, pivot_translate, pivot_translate_batch};
pub use offtarget::{off_target_rate, TokenLanguages};
pub use report::{
    evaluate_all_directions, translate_pairs, EvalMode, EvalOptions, MetricsReport, MetricsRow, TranslationResult,
};
