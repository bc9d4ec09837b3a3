use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bleu::{corpus_bleu, Smoothing};
use super::decode::{default_max_len, greedy_decode_batch, pivot_translate_batch};
use super::offtarget::TokenLanguages;
use crate::data::{ParallelCorpus, Vocabulary};
use crate::error::{invalid, Result};
use crate::model::TransformerModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Supervised,
    ZeroShot,
    /// Zero-shot direction decoded through the pivot language.
    Pivot,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Supervised => "supervised",
            EvalMode::ZeroShot => "zero-shot",
            EvalMode::Pivot => "pivot",
        })
    }
}

/// Hypotheses of one direction with their references.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslationResult {
    pub src_lang: usize,
    pub tgt_lang: usize,
    pub mode: EvalMode,
    pub hypotheses: Vec<Vec<usize>>,
    pub references: Vec<Vec<usize>>,
    /// Empty when no language ownership information was supplied.
    pub off_target: Vec<bool>,
}

impl TranslationResult {
    pub fn bleu(&self) -> Result<f64> {
        corpus_bleu(&self.hypotheses, &self.references, 4, Smoothing::Exp)
    }

    pub fn off_target_rate(&self) -> Option<f64> {
        if self.off_target.is_empty() {
            return None;
        }
        Some(self.off_target.iter().filter(|&&b| b).count() as f64 / self.off_target.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub src: String,
    pub tgt: String,
    pub mode: EvalMode,
    pub sentences: usize,
    pub bleu: f64,
    pub off_target_rate: Option<f64>,
}

/// Per-direction metrics, sorted by (mode, src, tgt).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn rows_for(&self, mode: EvalMode) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.mode == mode)
    }

    pub fn average_bleu(&self, mode: EvalMode) -> Option<f64> {
        mean(self.rows_for(mode).map(|r| r.bleu))
    }

    pub fn average_off_target(&self, mode: EvalMode) -> Option<f64> {
        mean(self.rows_for(mode).filter_map(|r| r.off_target_rate))
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    /// Averages per mode, one line each.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for mode in [EvalMode::Supervised, EvalMode::ZeroShot, EvalMode::Pivot] {
            if let Some(b) = self.average_bleu(mode) {
                s.push_str(&format!("{mode}\tbleu={b:.2}"));
                if let Some(o) = self.average_off_target(mode) {
                    s.push_str(&format!("\toff_target={o:.3}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Add pivot rows (src → pivot → tgt) for every zero-shot direction.
    pub pivot: bool,
    /// Sentences decoded together.
    pub decode_batch: usize,
    /// Evaluate only the first `n` sentences of each direction.
    pub max_sentences: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            pivot: true,
            decode_batch: 64,
            max_sentences: None,
        }
    }
}

/// Decode one direction of `pairs` (all pairs must share it).
pub fn translate_pairs<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    pairs: &ParallelCorpus,
    mode: EvalMode,
    pivot: usize,
    langs: Option<&TokenLanguages>,
    decode_batch: usize,
) -> Result<TranslationResult> {
    let dirs = pairs.directions();
    let &[(s, t)] = dirs.as_slice() else {
        return Err(invalid("translate_pairs needs exactly one direction"));
    };
    let max_pos = model.config().max_positions;
    let mut hypotheses = Vec::with_capacity(pairs.len());
    for chunk in pairs.pairs().chunks(decode_batch.max(1)) {
        let srcs: Vec<&[usize]> = chunk.iter().map(|p| p.src.as_slice()).collect();
        let tgts = vec![t; chunk.len()];
        let hyps = match mode {
            EvalMode::Pivot => pivot_translate_batch(model, vocab, &srcs, pivot, &tgts)?,
            _ => {
                let lens: Vec<usize> = srcs.iter().map(|s| default_max_len(s.len(), max_pos)).collect();
                greedy_decode_batch(model, vocab, &srcs, &tgts, &lens)?
            }
        };
        hypotheses.extend(hyps);
    }
    let off_target = langs.map_or_else(Vec::new, |l| {
        hypotheses.iter().map(|h| l.is_off_target(h, t, vocab)).collect()
    });
    Ok(TranslationResult {
        src_lang: s,
        tgt_lang: t,
        mode,
        references: pairs.pairs().iter().map(|p| p.tgt.clone()).collect(),
        hypotheses,
        off_target,
    })
}

/// BLEU and off-target rate for every direction in `test`, plus pivot rows.
pub fn evaluate_all_directions<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    test: &ParallelCorpus,
    pivot: usize,
    langs: Option<&TokenLanguages>,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<TranslationResult>)> {
    let mut results = Vec::new();
    for (s, t) in test.directions() {
        let mut dir = test.direction(s, t);
        if let Some(n) = opts.max_sentences {
            dir = ParallelCorpus::new(dir.pairs().iter().take(n).cloned().collect());
        }
        let zero_shot = s != pivot && t != pivot;
        let mode = if zero_shot { EvalMode::ZeroShot } else { EvalMode::Supervised };
        results.push(translate_pairs(model, vocab, &dir, mode, pivot, langs, opts.decode_batch)?);
        if zero_shot && opts.pivot {
            results.push(translate_pairs(model, vocab, &dir, EvalMode::Pivot, pivot, langs, opts.decode_batch)?);
        }
    }
    let codes = vocab.languages();
    let mut rows = results
        .iter()
        .map(|r| {
            Ok(MetricsRow {
                src: codes[r.src_lang].clone(),
                tgt: codes[r.tgt_lang].clone(),
                mode: r.mode,
                sentences: r.hypotheses.len(),
                bleu: r.bleu()?,
                off_target_rate: r.off_target_rate(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| (a.mode, &a.src, &a.tgt).cmp(&(b.mode, &b.src, &b.tgt)));
    Ok((MetricsReport { rows }, results))
}
