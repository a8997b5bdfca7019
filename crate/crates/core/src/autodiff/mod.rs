//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with whatever the backward pass needs (inputs, dropout masks, normalized
//! activations). [`Tape::backward`] walks the records in reverse order and
//! accumulates gradients additively, so a value that feeds several consumers
//! receives the sum of their contributions. Parameters live in a
//! [`ParamStore`] outside the tape; any number of tapes may borrow the same
//! store concurrently.

pub mod gradcheck;
pub mod nn;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::bce_value;
