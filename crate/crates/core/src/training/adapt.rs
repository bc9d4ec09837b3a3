use rand_distr::{Distribution, Normal};

use super::optim::OptimizerState;
use super::trainer::{train, TrainConfig, TrainOutcome};
use crate::data::{DirectionKind, ParallelCorpus, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::model::params::{LANG_EMBEDDING, TOKEN_EMBEDDING};
use crate::model::{ModelConfig, ParamStore, TransformerModel};
use crate::rng::{purpose, Rng, SeedStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Grow `table` to `rows` rows; each new row is the column mean of the
/// existing rows plus `N(0, noise²)` noise.
fn grow_table<T: Scalar>(table: &Tensor<T>, rows: usize, noise: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let (old, d) = (table.rows(), table.cols());
    if old == 0 {
        return Err(invalid("cannot grow an empty embedding table"));
    }
    let mut mean = vec![0.0f64; d];
    for r in 0..old {
        for (m, v) in mean.iter_mut().zip(table.row(r)) {
            *m += v.as_f64();
        }
    }
    for m in &mut mean {
        *m /= old as f64;
    }
    let normal = Normal::new(0.0, noise).map_err(|e| invalid(format!("noise scale: {e}")))?;
    let mut data = table.data().to_vec();
    for _ in old..rows {
        for &m in &mean {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push(T::from_f64_lossy(m + n));
        }
    }
    Tensor::new(vec![rows, d], data)
}

/// Copy of `model` sized for `new_vocab`. Existing token and language rows
/// are kept bitwise; new rows start at the mean of the old rows plus noise.
pub fn expand_vocabulary<T: Scalar>(
    model: &TransformerModel<T>,
    old_vocab: &Vocabulary,
    new_vocab: &Vocabulary,
    noise_scale: f64,
    seed: u64,
) -> Result<TransformerModel<T>> {
    if !old_vocab.is_prefix_of(new_vocab) {
        return Err(Error::Data("new vocabulary remaps existing token ids".into()));
    }
    if model.config().vocab_size != old_vocab.len() || model.config().num_languages != old_vocab.num_languages() {
        return Err(invalid("model does not match the old vocabulary"));
    }
    if !(noise_scale >= 0.0) {
        return Err(invalid("noise_scale must be non-negative"));
    }
    let seeds = SeedStream::new(seed);
    let config = ModelConfig {
        vocab_size: new_vocab.len(),
        num_languages: new_vocab.num_languages(),
        lang_embed_dim: model.config().lang_dim(),
        ..model.config().clone()
    };
    let mut store = ParamStore::default();
    for (_, name, t) in model.params().iter() {
        let grown = match name {
            TOKEN_EMBEDDING => grow_table(t, config.vocab_size, noise_scale, &mut seeds.stream(purpose::EXPAND, 0))?,
            LANG_EMBEDDING => {
                grow_table(t, config.num_languages, noise_scale, &mut seeds.stream(purpose::EXPAND, 1))?
            }
            _ => t.clone(),
        };
        store.push(name, grown);
    }
    TransformerModel::from_params(config, store)
}

/// Fine-tune on the original supervised data plus the new-language data,
/// mixed in proportion to their sizes.
#[allow(clippy::too_many_arguments)]
pub fn adapt_to_new_language<T: Scalar>(
    model: &mut TransformerModel<T>,
    vocab: &Vocabulary,
    original_train: &ParallelCorpus,
    new_train: &ParallelCorpus,
    dev: &ParallelCorpus,
    pivot: usize,
    cfg: &TrainConfig,
    optimizer: Option<OptimizerState<T>>,
) -> Result<TrainOutcome<T>> {
    if model.config().vocab_size != vocab.len() {
        return Err(invalid("expand the vocabulary before adaptation"));
    }
    for (name, part) in [("new-language", new_train), ("original", original_train)] {
        if let Some(p) = part.pairs().iter().find(|p| p.src_lang != pivot && p.tgt_lang != pivot) {
            let l = vocab.languages();
            return Err(Error::Data(format!(
                "{name} training data contains non-pivot pair {}-{}",
                l[p.src_lang], l[p.tgt_lang]
            )));
        }
    }
    let mut union = original_train.clone();
    union.extend(new_train.clone());
    union.retag(pivot);
    debug_assert!(union.pairs().iter().all(|p| p.kind == DirectionKind::Supervised));
    train(model, vocab, &union, dev, cfg, optimizer)
}
