//! Dense `f64` tensors, a recording tape for reverse-mode gradients, and the
//! RMSProp optimizer used to train the super-resolution and descriptor
//! networks.
//!
//! Values are computed in 64-bit floating point. Network parameters are kept
//! on the 32-bit grid by their owners (see [`Tensor::round_to_f32`]) so that
//! checkpoints stored as `f32` round-trip exactly.

mod error;
pub mod gradcheck;
mod kernels;
pub mod optim;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use optim::{OptimizerState, RmsPropConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
