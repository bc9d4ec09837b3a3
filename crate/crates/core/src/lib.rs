//! Multilingual neural machine translation at desk scale, built around an
//! encoder variant that drops the self-attention residual connection in one
//! middle layer (optionally with a position-based attention query) to weaken
//! the positional correspondence between encoder outputs and input tokens.
//!
//! The crate is generic over the float type (see [`Scalar`]); training runs
//! in `f32` and gradient oracles in `f64`. Aliases for the common
//! instantiations live at the crate root.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{DropoutMode, ParamId, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, TransformerModel};
pub use rng::SeedStream;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Storage-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Oracle-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Model in training precision.
pub type Model = TransformerModel<f32>;
/// Model in double precision (gradient checks).
pub type Model64 = TransformerModel<f64>;
