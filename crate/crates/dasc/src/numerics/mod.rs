//! Differentiable-computation substrate: tensors, the operation tape with
//! exact reverse-mode gradients, parameter storage/checkpoints, and the
//! finite-difference verification harness.

pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, relative_error, FdReport};
pub use params::{Param, ParamStore};
pub use tape::{Gradients, NodeId, Padding, Tape, VarianceSign};
pub use tensor::{Scalar, Tensor};
