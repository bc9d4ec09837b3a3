use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
use super::schedule::noam_lr;
use crate::autodiff::Tape;
use crate::data::{make_batches, Batch, DirectionKind, ParallelCorpus, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::model::checkpoint::{checkpoint_name, save_checkpoint};
use crate::model::{ParamStore, Pass, TransformerModel};
use crate::rng::{purpose, SeedStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which dev directions drive checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DevSelection {
    SupervisedOnly,
    IncludeZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub max_epochs: usize,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
    pub batch_size_tokens: usize,
    /// Multiplier on the Noam learning rate.
    pub lr_scale: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub checkpoint_keep_k: usize,
    pub adam: AdamConfig,
    pub dev_selection: DevSelection,
    /// Start from a fresh optimizer when continuing from a trained model.
    pub reset_optimizer: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 400,
            max_epochs: 20,
            max_steps: None,
            batch_size_tokens: 1024,
            lr_scale: 1.0,
            grad_clip: 1.0,
            seed: 1,
            checkpoint_keep_k: 5,
            adam: AdamConfig::default(),
            dev_selection: DevSelection::SupervisedOnly,
            reset_optimizer: true,
            checkpoint_dir: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            warmup_steps: 8000,
            max_epochs: 64,
            batch_size_tokens: 4096,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be ≥ 1".into()));
        }
        if self.checkpoint_keep_k == 0 || self.batch_size_tokens == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "checkpoint_keep_k, batch_size_tokens and max_epochs must be positive".into(),
            ));
        }
        if !(self.lr_scale > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("lr_scale and grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionLoss {
    /// `src-tgt` language codes.
    pub direction: String,
    pub kind: String,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Updates applied so far.
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Token-weighted dev loss over the selection directions.
    pub dev_loss: f64,
    pub dev: Vec<DirectionLoss>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epochs whose parameters were averaged into the final model.
    pub averaged_epochs: Vec<usize>,
    pub final_dev_loss: f64,
}

impl TrainHistory {
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: TrainHistory,
    pub optimizer: OptimizerState<T>,
}

fn direction_name(vocab: &Vocabulary, s: usize, t: usize) -> String {
    let l = vocab.languages();
    format!("{}-{}", l[s], l[t])
}

/// Mean label-smoothed loss of one batch without dropout, and its token count.
pub fn batch_loss<T: Scalar>(model: &TransformerModel<T>, batch: &Batch) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let loss = model.loss_on_tape(&mut tape, &batch.examples(), &mut Pass::Eval)?;
    Ok((tape.value(loss).item().as_f64(), batch.target_tokens()))
}

/// Dev loss per direction of `pairs` (sorted by direction).
pub fn evaluate_loss<T: Scalar>(
    model: &TransformerModel<T>,
    vocab: &Vocabulary,
    pairs: &ParallelCorpus,
    batch_size_tokens: usize,
) -> Result<Vec<DirectionLoss>> {
    let mut out = Vec::new();
    for (s, t) in pairs.directions() {
        let dir = pairs.direction(s, t);
        let batches = make_batches(dir.pairs(), vocab, batch_size_tokens, model.config().max_positions, 0)?;
        let (mut total, mut tokens) = (0.0, 0);
        for b in &batches {
            let (l, n) = batch_loss(model, b)?;
            total += l * n as f64;
            tokens += n;
        }
        let loss = total / tokens as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("dev loss of {}", direction_name(vocab, s, t))));
        }
        out.push(DirectionLoss {
            direction: direction_name(vocab, s, t),
            kind: dir.pairs()[0].kind.to_string(),
            loss,
            tokens,
        });
    }
    Ok(out)
}

fn selection_loss(dev: &[DirectionLoss], mode: DevSelection) -> f64 {
    let zero_shot = DirectionKind::ZeroShot.to_string();
    let (total, tokens) = dev
        .iter()
        .filter(|d| mode == DevSelection::IncludeZeroShot || d.kind != zero_shot)
        .fold((0.0, 0), |(l, n), d| (l + d.loss * d.tokens as f64, n + d.tokens));
    total / tokens as f64
}

/// Gradients of one batch in parameter order, and the batch loss.
pub fn batch_gradients<T: Scalar>(
    model: &TransformerModel<T>,
    batch: &Batch,
    pass: &mut Pass<'_>,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let loss = model.loss_on_tape(&mut tape, &batch.examples(), pass)?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params().len()];
    for (id, g) in tape.param_grads() {
        grads[id.0] = g.cloned();
    }
    Ok((value, grads))
}

/// Train with Adam and the Noam schedule, keep the `k` best epochs by dev
/// loss and leave their parameter average in `model`.
pub fn train<T: Scalar>(
    model: &mut TransformerModel<T>,
    vocab: &Vocabulary,
    train_pairs: &ParallelCorpus,
    dev_pairs: &ParallelCorpus,
    cfg: &TrainConfig,
    optimizer: Option<OptimizerState<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(invalid("empty training set"));
    }
    let dev_pairs = match cfg.dev_selection {
        DevSelection::SupervisedOnly => dev_pairs.filter(|p| p.kind == DirectionKind::Supervised),
        DevSelection::IncludeZeroShot => dev_pairs.clone(),
    };
    if dev_pairs.is_empty() {
        return Err(invalid("no dev pairs for checkpoint selection"));
    }
    let mut state = match optimizer {
        Some(s) if !cfg.reset_optimizer => s,
        _ => OptimizerState::new(model.params()),
    };
    let seeds = SeedStream::new(cfg.seed);
    let d_model = model.config().d_model;
    let mut history = TrainHistory::default();
    let mut kept: Vec<(f64, usize, ParamStore<T>)> = Vec::new();
    let mut steps = 0usize;
    let mut lr = 0.0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let batch_seed = seeds.derive(purpose::BATCHING, epoch as u64).seed();
        let batches = make_batches(
            train_pairs.pairs(),
            vocab,
            cfg.batch_size_tokens,
            model.config().max_positions,
            batch_seed,
        )?;
        let mut rng = seeds.stream(purpose::DROPOUT, epoch as u64);
        let (mut total, mut tokens) = (0.0, 0usize);
        let mut stop = false;
        for batch in &batches {
            let (loss, mut grads) = batch_gradients(model, batch, &mut Pass::Train(&mut rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", steps + 1)));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            lr = cfg.lr_scale * noam_lr(state.step + 1, d_model, cfg.warmup_steps)?;
            adam_step(model.params_mut(), &grads, &mut state, &cfg.adam, lr)?;
            steps += 1;
            total += loss * batch.target_tokens() as f64;
            tokens += batch.target_tokens();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        let dev = evaluate_loss(model, vocab, &dev_pairs, cfg.batch_size_tokens)?;
        let dev_loss = selection_loss(&dev, cfg.dev_selection);
        if !dev_loss.is_finite() {
            return Err(Error::NonFinite(format!("dev loss at epoch {epoch}")));
        }
        let record = EpochRecord {
            epoch,
            steps,
            lr,
            train_loss: total / tokens as f64,
            dev_loss,
            dev,
        };
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:3} steps {steps:6} lr {lr:.2e} train {:.4} dev {dev_loss:.4}",
                record.train_loss
            );
        }
        history.epochs.push(record);

        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(model, &vocab.hash(), &dir.join(checkpoint_name(epoch)))?;
        }
        kept.push((dev_loss, epoch, model.params().clone()));
        kept.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, dropped, _) in kept.drain(cfg.checkpoint_keep_k.min(kept.len())..) {
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::remove_dir_all(dir.join(checkpoint_name(dropped)))?;
            }
        }
        if stop {
            break 'epochs;
        }
    }

    let stores: Vec<&ParamStore<T>> = kept.iter().map(|k| &k.2).collect();
    model.set_params(ParamStore::average(&stores)?)?;
    history.averaged_epochs = kept.iter().map(|k| k.1).collect();
    let dev = evaluate_loss(model, vocab, &dev_pairs, cfg.batch_size_tokens)?;
    history.final_dev_loss = selection_loss(&dev, cfg.dev_selection);
    Ok(TrainOutcome {
        history,
        optimizer: state,
    })
}
