//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! The op set is small on purpose: convolution, batch norm, pooling,
//! bilinear resizing, channel gating and a pixel-weighted cross entropy,
//! which is what an encoder-decoder segmentation network needs.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod par;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, cosine_lr, GroupScale, OptimizerState};
pub use tape::{sigmoid, BnMode, Gradients, PoolOp, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
