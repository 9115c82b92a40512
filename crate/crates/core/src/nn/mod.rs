//! Encoder, projection heads, parameter storage, Adam and checkpoints.

mod adam;
mod checkpoint;
mod model;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use model::{anomaly_scores, Bound, EncoderConfig, SupConNet, NUM_CLASSES};
pub use params::{init_parameters, Param, ParamGroup, ParamSet};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("expected input of shape [batch, 1, {extent}, {extent}, {extent}], got {shape:?}")]
    InputExtent { extent: usize, shape: Vec<usize> },
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradientShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("expected {expected} gradient slots, got {actual}")]
    GradientCount { expected: usize, actual: usize },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
}
