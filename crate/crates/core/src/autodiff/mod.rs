//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! Only the primitives the tracker network needs are provided. A [`Tape`]
//! records each primitive together with what its backward pass needs and is
//! consumed by a single backward call.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var, MASK_LOGIT};
pub use tensor::{Real, Tensor};
