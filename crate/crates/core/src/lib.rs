//! Supervised contrastive learning toolkit for binary classification of
//! small 3D volumes.

pub mod data;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod sampling;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Scalar, Tensor, TensorError, Var};
