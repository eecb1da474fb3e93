//! Dense tensors, reverse-mode differentiation, AdamW and the cosine schedule.

mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, InputReport, REL_ERROR_FLOOR};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, OptimizerState};
pub use params::{Bound, ParameterSet};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::{softmax, Tensor};

