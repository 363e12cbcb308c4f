//! Dual-phase ECG/CMR contrastive representation learning.
// `!(a < b)` comparisons are used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod cohort;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod signal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Gradients, Primitive, Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
