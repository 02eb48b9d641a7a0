//! Small reverse-mode differentiation engine over `f32` NHWC tensors.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BatchStats, Gradients, OpAttrs, OpKind, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::{zero_grads, Parameter, Tensor};
