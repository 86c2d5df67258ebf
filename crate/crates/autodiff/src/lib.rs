//! A small reverse-mode automatic differentiation engine.
//!
//! Operations are recorded on a [`Tape`] through [`Var`] handles; a single
//! [`Tape::backward`] sweep from a scalar returns gradients for every trainable
//! leaf. Everything runs in `f64`. Ops cover exactly what the speech pipeline
//! needs: dense algebra, dilated and transposed 1-D convolutions, an LSTM cell,
//! softmax families, gamma-family special functions, FIR filtering and
//! windowed DFT power frames.

mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod special;
mod tape;
mod tensor;

pub use error::{AdError, Result};
pub use gradcheck::{directional_check, gradient_check, CheckConfig, CheckReport};
pub use kernels::FrameSpec;
pub use ops::{log_sum_exp, sigmoid, softmax_in_place};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
