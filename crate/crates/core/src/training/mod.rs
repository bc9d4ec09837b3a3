//! Optimizer, learning-rate schedule, training loop and new-language
//! adaptation.

mod adapt;
mod optim;
mod schedule;
mod trainer;

pub use adapt::{adapt_to_new_language, expand_vocabulary};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
pub use schedule::noam_lr;
pub use trainer::{
    batch_gradients, batch_loss, evaluate_loss, train, DevSelection, DirectionLoss, EpochRecord, TrainConfig,
    TrainHistory, TrainOutcome,
};
