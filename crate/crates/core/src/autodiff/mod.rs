//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the segmentation network needs are provided: matrix
//! products, 1×1/3×3 convolution, batch normalization, nearest upsampling,
//! row-wise softmax and L2 normalization, a handful of structural ops, and
//! pixel-wise cross-entropy. Every op is a method on [`Tape`]; on a
//! [`Tape::no_grad`] tape the same methods evaluate eagerly without recording.

mod adam;
mod conv;
pub(crate) mod gemm;
pub mod gradcheck;
mod loss;
mod norm;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{directional_derivative_check, finite_difference_check, finite_difference_check_params, GradCheck};
pub use norm::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::softmax_in_place;
pub use params::{fan_in_uniform, init_conv, init_conv_weight, init_norm, Buffers, ParamSet};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;
