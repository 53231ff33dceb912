//! Dense `f64` tensors, a reverse-mode tape, Adam, and gradient checking.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{BoundParams, ParamStore};
pub use tape::{AttentionLayout, Fault, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
