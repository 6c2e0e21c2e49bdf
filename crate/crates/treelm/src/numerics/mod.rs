//! Minimal dense-array math: f64 tensors, pure kernels, a reverse-mode
//! gradient tape, finite-difference checking, and the MAC/memory
//! instrumentation hooks.

pub mod gradcheck;
pub mod ops;
pub mod profile;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_mapped};
pub use tape::{Grads, Tape, ValueId};
pub use tensor::Tensor;
