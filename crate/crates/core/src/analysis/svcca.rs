use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{layer_states, meanpool_sentences, FeatureMatrix};
use crate::data::{ParallelCorpus, Vocabulary, EOS};
use crate::error::{invalid, Error, Result};
use crate::model::TransformerModel;
use crate::rng::{purpose, SeedStream};
use crate::scalar::Scalar;

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.99;

/// Orthonormal basis (`n×k`) of the top singular directions of the
/// column-centred matrix that explain `threshold` of its variance.
fn reduced_basis(x: &FeatureMatrix, threshold: f64) -> Result<DMatrix<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = DMatrix::from_row_slice(n, d, x.data());
    let scale = m.norm();
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let svd = m.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let s = &svd.singular_values;
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    if !(s_max > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical("rank-0 feature matrix".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).filter(|&i| s[i] > 1e-10 * s_max).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let total: f64 = order.iter().map(|&i| s[i] * s[i]).sum();
    let mut acc = 0.0;
    let mut keep = Vec::new();
    for &i in &order {
        keep.push(i);
        acc += s[i] * s[i];
        if acc >= threshold * total {
            break;
        }
    }
    Ok(u.select_columns(keep.iter()))
}

/// SVCCA similarity of two row-aligned representations: SVD reduction to
/// `variance_threshold` of the variance, then the mean canonical
/// correlation between the reduced subspaces.
pub fn svcca_score(x: &FeatureMatrix, y: &FeatureMatrix, variance_threshold: f64) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(invalid(format!(
            "SVCCA needs row-aligned inputs, got {} and {} rows",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(invalid("SVCCA needs at least 2 rows"));
    }
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(invalid("variance_threshold must be in (0, 1]"));
    }
    let ux = reduced_basis(x, variance_threshold)?;
    let uy = reduced_basis(y, variance_threshold)?;
    // Canonical correlations between two subspaces are the singular values
    // of the product of their orthonormal bases.
    let rho = (ux.transpose() * uy).singular_values();
    let k = rho.len();
    Ok(rho.iter().map(|r| r.clamp(0.0, 1.0)).sum::<f64>() / k as f64)
}

/// Mean SVCCA score between independent standard-normal `n×d` matrices.
pub fn random_svcca_baseline(n: usize, d: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let seeds = SeedStream::new(seed);
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = seeds.stream(purpose::BASELINE, t as u64);
        let mut draw = || -> Result<FeatureMatrix> {
            let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            FeatureMatrix::new(n, d, data, vec![0; n])
        };
        let (x, y) = (draw()?, draw()?);
        total += svcca_score(&x, &y, DEFAULT_VARIANCE_THRESHOLD)?;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvccaEntry {
    pub layer: usize,
    pub lang_a: String,
    pub lang_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub num_layers: usize,
    pub sentences: usize,
    pub languages: Vec<String>,
    /// Mean score between independent Gaussian matrices of the same shape.
    pub random_baseline: f64,
    pub entries: Vec<SvccaEntry>,
}

impl SimilarityReport {
    /// Mean over language pairs at `layer`.
    pub fn mean_at(&self, layer: usize) -> Option<f64> {
        let scores: Vec<f64> = self.entries.iter().filter(|e| e.layer == layer).map(|e| e.score).collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// `(layer, mean score)` for layers `1..=L`.
    pub fn layer_means(&self) -> Vec<(usize, f64)> {
        (1..=self.num_layers).filter_map(|l| self.mean_at(l).map(|m| (l, m))).collect()
    }

    /// Layer `l ≥ 2` with the largest increase over layer `l - 1`.
    pub fn largest_increase_layer(&self) -> Option<usize> {
        self.layer_means()
            .windows(2)
            .map(|w| (w[1].0, w[1].1 - w[0].1))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(l, _)| l)
    }

    /// Text table: one row per layer, one column per pair, then the mean
    /// and the mean relative to the random baseline.
    pub fn to_table(&self) -> String {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for e in &self.entries {
            if !pairs.iter().any(|(a, b)| *a == e.lang_a && *b == e.lang_b) {
                pairs.push((e.lang_a.clone(), e.lang_b.clone()));
            }
        }
        let mut out = String::from("layer");
        for (a, b) in &pairs {
            let _ = write!(out, "\t{a}-{b}");
        }
        out.push_str("\tmean\tover_random\n");
        for (l, mean) in self.layer_means() {
            let _ = write!(out, "{l}");
            for (a, b) in &pairs {
                let s = self.entries.iter().find(|e| e.layer == l && e.lang_a == *a && e.lang_b == *b);
                let _ = write!(out, "\t{:.4}", s.map_or(f64::NAN, |e| e.score));
            }
            let _ = writeln!(out, "\t{mean:.4}\t{:+.4}", mean - self.random_baseline);
        }
        let _ = writeln!(out, "random\t{:.4}", self.random_baseline);
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

/// Sentences of each language that are translations of each other, keyed
/// by group. Fails when a group carries different sentences for the same
/// language, which happens for pairwise (non-multiway) pools.
pub fn multiway_sentences(corpus: &ParallelCorpus) -> Result<(Vec<usize>, Vec<Vec<Vec<usize>>>)> {
    let mut by_lang: BTreeMap<usize, BTreeMap<(u8, usize), &[usize]>> = BTreeMap::new();
    for p in corpus.pairs() {
        for (lang, toks) in [(p.src_lang, &p.src), (p.tgt_lang, &p.tgt)] {
            let slot = by_lang.entry(lang).or_default();
            let key = (p.split as u8, p.group);
            match slot.get(&key) {
                Some(prev) if *prev != toks.as_slice() => {
                    return Err(Error::Data(format!(
                        "corpus is not multiway: group {} has two different sentences in language {lang}",
                        p.group
                    )))
                }
                _ => {
                    slot.insert(key, toks);
                }
            }
        }
    }
    if by_lang.len() < 2 {
        return Err(Error::Data("multiway analysis needs at least two languages".into()));
    }
    let langs: Vec<usize> = by_lang.keys().copied().collect();
    let first = &by_lang[&langs[0]];
    let shared: Vec<(u8, usize)> = first
        .keys()
        .filter(|k| by_lang.values().all(|m| m.contains_key(k)))
        .copied()
        .collect();
    if shared.len() < 2 {
        return Err(Error::Data(format!(
            "only {} sentence groups are aligned across all languages",
            shared.len()
        )));
    }
    let sentences = langs
        .iter()
        .map(|l| shared.iter().map(|k| by_lang[l][k].to_vec()).collect())
        .collect();
    Ok((langs, sentences))
}

/// SVCCA between every unordered language pair after each encoder layer,
/// on mean-pooled states of multiway-aligned sentences.
pub fn per_layer_svcca<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    corpus: &ParallelCorpus,
    seed: u64,
) -> Result<SimilarityReport> {
    let (langs, sentences) = multiway_sentences(corpus)?;
    let num_layers = model.config().num_encoder_layers;
    // pooled[lang][layer]
    let mut pooled: Vec<Vec<FeatureMatrix>> = Vec::new();
    for sents in &sentences {
        let inputs: Vec<Vec<usize>> = sents.iter().map(|s| [&s[..], &[EOS][..]].concat()).collect();
        let refs: Vec<&[usize]> = inputs.iter().map(|s| s.as_slice()).collect();
        let states = layer_states(model, &refs, 64)?;
        let mut per_layer = Vec::with_capacity(num_layers);
        for l in 1..=num_layers {
            let acts: Vec<_> = states.iter().map(|s| s[l].clone()).collect();
            per_layer.push(meanpool_sentences(&acts, &refs)?);
        }
        pooled.push(per_layer);
    }
    let names = vocab.languages();
    let code = |l: usize| names.get(l).cloned().unwrap_or_else(|| l.to_string());
    let mut entries = Vec::new();
    for layer in 1..=num_layers {
        for a in 0..langs.len() {
            for b in a + 1..langs.len() {
                let score = svcca_score(&pooled[a][layer - 1], &pooled[b][layer - 1], DEFAULT_VARIANCE_THRESHOLD)?;
                entries.push(SvccaEntry {
                    layer,
                    lang_a: code(langs[a]),
                    lang_b: code(langs[b]),
                    score,
                });
            }
        }
    }
    let n = sentences[0].len();
    Ok(SimilarityReport {
        num_layers,
        sentences: n,
        languages: langs.iter().map(|&l| code(l)).collect(),
        random_baseline: random_svcca_baseline(n, model.config().d_model, 5, seed)?,
        entries,
    })
}
