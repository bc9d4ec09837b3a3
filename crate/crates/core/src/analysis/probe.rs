use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::{layer_states, FeatureMatrix};
use crate::data::EOS;
use crate::error::{invalid, Error, Result};
use crate::model::TransformerModel;
use crate::rng::{purpose, SeedStream};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_tn};

/// Update rule of the full-batch probe optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeOptimizer {
    GradientDescent,
    /// Per-parameter step normalization (β = 0.9, 0.999); rare classes
    /// get weight updates of the same size as frequent ones.
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: ProbeOptimizer,
    pub train_fraction: f64,
    /// Standardize features with the training rows' mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.1,
            optimizer: ProbeOptimizer::default(),
            train_fraction: 0.8,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    /// Accuracy on the held-out rows.
    pub accuracy: f64,
    pub train_rows: Vec<usize>,
    pub eval_rows: Vec<usize>,
    pub final_train_loss: f64,
}

/// Split row indices `0..n` into train and held-out parts.
pub fn probe_split(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(invalid("a probe needs at least 2 rows"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid("train_fraction must be in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedStream::new(seed).stream(purpose::PROBE, 0));
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let eval = idx.split_off(cut);
    Ok((idx, eval))
}

/// Multinomial logistic regression on the features, trained on the full
/// training split for a fixed number of epochs; accuracy is measured on
/// held-out rows.
pub fn fit_linear_probe(features: &FeatureMatrix, num_classes: usize, split_seed: u64, cfg: &ProbeConfig) -> Result<ProbeFit> {
    let labels = features.labels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(invalid(format!("label {bad} out of range for {num_classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Data("probe labels contain a single class".into()));
    }
    let (train_rows, eval_rows) = probe_split(features.rows(), cfg.train_fraction, split_seed)?;
    let d = features.cols();
    let c = num_classes;

    let (mut mean, mut inv_std) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for &r in &train_rows {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= train_rows.len() as f64);
        let mut var = vec![0.0; d];
        for &r in &train_rows {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (i, s) in inv_std.iter_mut().zip(&var) {
            let sd = (s / train_rows.len() as f64).sqrt();
            *i = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
    }
    let gather = |rows: &[usize]| -> Vec<f64> {
        rows.iter()
            .flat_map(|&r| features.row(r).iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s))
            .collect()
    };
    let x_train = gather(&train_rows);
    let x_eval = gather(&eval_rows);
    let n = train_rows.len();

    let mut w = vec![0.0f64; d * c];
    let mut b = vec![0.0f64; c];
    let mut probs = vec![0.0f64; n * c];
    let mut gw = vec![0.0f64; d * c];
    let mut gb = vec![0.0f64; c];
    let mut adam_w = Adam::new(d * c);
    let mut adam_b = Adam::new(c);
    let mut loss = 0.0;
    for _ in 0..cfg.epochs {
        logits_into(&x_train, &w, &b, &mut probs, n, d, c);
        loss = 0.0;
        for (i, &r) in train_rows.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let y = labels[r];
            loss -= (row[y] / z).ln();
            for p in row.iter_mut() {
                *p /= z * n as f64;
            }
            row[y] -= 1.0 / n as f64;
        }
        loss /= n as f64;
        gw.fill(0.0);
        gemm_tn(&x_train, &probs, &mut gw, n, d, c);
        gb.fill(0.0);
        for row in probs.chunks_exact(c) {
            for (g, p) in gb.iter_mut().zip(row) {
                *g += p;
            }
        }
        match cfg.optimizer {
            ProbeOptimizer::GradientDescent => {
                for (p, g) in w.iter_mut().zip(&gw).chain(b.iter_mut().zip(&gb)) {
                    *p -= cfg.learning_rate * g;
                }
            }
            ProbeOptimizer::Adam => {
                adam_w.step(&mut w, &gw, cfg.learning_rate);
                adam_b.step(&mut b, &gb, cfg.learning_rate);
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("probe training loss".into()));
    }

    let m = eval_rows.len();
    let mut scores = vec![0.0f64; m * c];
    logits_into(&x_eval, &w, &b, &mut scores, m, d, c);
    let correct = eval_rows
        .iter()
        .enumerate()
        .filter(|&(i, &r)| argmax(&scores[i * c..(i + 1) * c]) == labels[r])
        .count();
    Ok(ProbeFit {
        accuracy: correct as f64 / m as f64,
        train_rows,
        eval_rows,
        final_train_loss: loss,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }
}

fn logits_into(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], n: usize, d: usize, c: usize) {
    for row in out.chunks_exact_mut(c) {
        row.copy_from_slice(b);
    }
    gemm_nn(x, w, out, n, d, c);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelType {
    TokenId,
    PositionId,
    LanguageId,
}

impl fmt::Display for LabelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelType::TokenId => "token-id",
            LabelType::PositionId => "position-id",
            LabelType::LanguageId => "language-id",
        })
    }
}

impl FromStr for LabelType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token-id" | "token_id" => Ok(LabelType::TokenId),
            "position-id" | "position_id" => Ok(LabelType::PositionId),
            "language-id" | "language_id" => Ok(LabelType::LanguageId),
            _ => Err(invalid(format!("unknown probe label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub label: LabelType,
    pub layer: usize,
    pub accuracy: f64,
    pub num_classes: usize,
    pub train_rows: usize,
    pub eval_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    pub entries: Vec<ProbeEntry>,
}

impl ProbeReport {
    pub fn accuracy(&self, label: LabelType, layer: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.label == label && e.layer == layer)
            .map(|e| e.accuracy)
    }

    /// `(layer, accuracy)` for one label, by layer.
    pub fn curve(&self, label: LabelType) -> Vec<(usize, f64)> {
        let mut c: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.label == label)
            .map(|e| (e.layer, e.accuracy))
            .collect();
        c.sort_by_key(|p| p.0);
        c
    }

    /// Layer with the largest accuracy drop from the previous layer.
    pub fn largest_drop_layer(&self, label: LabelType) -> Option<usize> {
        self.curve(label)
            .windows(2)
            .map(|w| (w[1].0, w[0].1 - w[1].1))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
    }

    pub fn merge(&mut self, other: ProbeReport) {
        self.entries.extend(other.entries);
    }

    /// Text table: one row per layer, one column per label type.
    pub fn to_table(&self) -> String {
        let labels: Vec<LabelType> = {
            let mut l: Vec<_> = self.entries.iter().map(|e| e.label).collect();
            l.sort();
            l.dedup();
            l
        };
        let mut layers: Vec<usize> = self.entries.iter().map(|e| e.layer).collect();
        layers.sort();
        layers.dedup();
        let mut out = String::from("layer");
        for l in &labels {
            let _ = write!(out, "\t{l}");
        }
        out.push('\n');
        for layer in layers {
            let _ = write!(out, "{layer}");
            for &l in &labels {
                match self.accuracy(l, layer) {
                    Some(a) => {
                        let _ = write!(out, "\t{:.2}", 100.0 * a);
                    }
                    None => out.push_str("\t-"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Per-timestep features at `layer` for `sentences` (token ids without
/// EOS, and their language), labelled by `label`. Returns the matrix and
/// its class count.
pub fn timestep_features<T: Scalar>(
    model: &TransformerModel<T>,
    sentences: &[(Vec<usize>, usize)],
    label: LabelType,
    layer: usize,
) -> Result<(FeatureMatrix, usize)> {
    Ok(timestep_features_multi(model, sentences, label, &[layer])?.remove(0))
}

fn timestep_features_multi<T: Scalar>(
    model: &TransformerModel<T>,
    sentences: &[(Vec<usize>, usize)],
    label: LabelType,
    layers: &[usize],
) -> Result<Vec<(FeatureMatrix, usize)>> {
    let num_layers = model.config().num_encoder_layers;
    if let Some(&l) = layers.iter().find(|&&l| l > num_layers) {
        return Err(invalid(format!("layer {l} out of range 0..={num_layers}")));
    }
    if sentences.is_empty() {
        return Err(invalid("no sentences to probe"));
    }
    let inputs: Vec<Vec<usize>> = sentences.iter().map(|(s, _)| [&s[..], &[EOS][..]].concat()).collect();
    let refs: Vec<&[usize]> = inputs.iter().map(|s| s.as_slice()).collect();
    let states = layer_states(model, &refs, 64)?;

    let mut raw = Vec::new();
    for (input, (_, lang)) in inputs.iter().zip(sentences) {
        for (pos, &tok) in input.iter().enumerate() {
            raw.push(match label {
                LabelType::TokenId => tok,
                LabelType::PositionId => pos,
                LabelType::LanguageId => *lang,
            });
        }
    }
    // Dense class ids in ascending order of the raw label.
    let classes: BTreeMap<usize, usize> = {
        let mut v = raw.clone();
        v.sort();
        v.dedup();
        v.into_iter().enumerate().map(|(i, r)| (r, i)).collect()
    };
    let labels: Vec<usize> = raw.iter().map(|r| classes[r]).collect();
    let d = model.config().d_model;
    layers
        .iter()
        .map(|&layer| {
            let mut data = Vec::with_capacity(labels.len() * d);
            for s in &states {
                data.extend(s[layer].data().iter().map(|v| v.as_f64()));
            }
            Ok((FeatureMatrix::new(labels.len(), d, data, labels.clone())?, classes.len()))
        })
        .collect()
}

/// Fit one probe per requested layer (0 is the embedded input, `L` the last
/// encoder layer) on states collected without dropout.
pub fn probe_positional_information<T: Scalar>(
    model: &TransformerModel<T>,
    sentences: &[(Vec<usize>, usize)],
    label: LabelType,
    layers: &[usize],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let mut report = ProbeReport::default();
    for (&layer, (features, classes)) in layers.iter().zip(timestep_features_multi(model, sentences, label, layers)?) {
        let fit = fit_linear_probe(&features, classes, seed, cfg)?;
        report.entries.push(ProbeEntry {
            label,
            layer,
            accuracy: fit.accuracy,
            num_classes: classes,
            train_rows: fit.train_rows.len(),
            eval_rows: fit.eval_rows.len(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_two_class_is_perfect() {
        let n = 60;
        let data: Vec<f64> = (0..n).flat_map(|i| [if i % 2 == 0 { 2.0 } else { -2.0 }, (i as f64 * 0.37).sin()]).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        let f = FeatureMatrix::new(n, 2, data, labels).unwrap();
        let fit = fit_linear_probe(&f, 2, 1, &ProbeConfig::default()).unwrap();
        assert_eq!(fit.accuracy, 1.0);
        assert_eq!(fit.train_rows.len(), 48);
        assert_eq!(fit.eval_rows.len(), 12);
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (tr, ev) = probe_split(37, 0.8, 5).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&ev).copied().collect();
        all.sort();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert!(tr.iter().all(|r| !ev.contains(r)));
        assert_eq!(probe_split(37, 0.8, 5).unwrap(), (tr, ev));
    }

    #[test]
    fn errors() {
        let f = FeatureMatrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0], vec![0; 4]).unwrap();
        assert!(matches!(fit_linear_probe(&f, 2, 0, &ProbeConfig::default()), Err(Error::Data(_))));
        let f = f.with_labels(vec![0, 1, 2, 0]).unwrap();
        assert!(fit_linear_probe(&f, 2, 0, &ProbeConfig::default()).is_err());
        assert!("token-id".parse::<LabelType>().is_ok());
        assert!("bogus".parse::<LabelType>().is_err());
    }

    #[test]
    fn report_curves() {
        let e = |layer, accuracy| ProbeEntry {
            label: LabelType::PositionId,
            layer,
            accuracy,
            num_classes: 3,
            train_rows: 8,
            eval_rows: 2,
        };
        let r = ProbeReport {
            entries: vec![e(2, 0.4), e(0, 1.0), e(1, 0.9), e(3, 0.35)],
        };
        assert_eq!(r.curve(LabelType::PositionId).len(), 4);
        assert_eq!(r.largest_drop_layer(LabelType::PositionId), Some(2));
        assert!(r.to_table().starts_with("layer\tposition-id\n0\t100.00\n"));
    }
}
