//! Reverse-mode automatic differentiation over small `f32` image tensors.
//!
//! The operation set is exactly what a fully convolutional encoder-decoder
//! needs: dilated convolution, 2×2 max pooling with argmax indices,
//! unpooling, bilinear upsampling, area downsampling, batch norm, ReLU,
//! channel concatenation and a few scalar reductions. Losses and other
//! fused operations plug in through [`CustomOp`].

pub mod adadelta;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adadelta::{AdadeltaConfig, AdadeltaState};
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{BatchNormConfig, CustomOp, Graph, Mode, PoolIndices, RunningStats, Var};
pub use tensor::Tensor;
