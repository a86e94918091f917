//! Numeric foundation: deterministic PRNG, dense 2-D tensors, a tape-based
//! reverse-mode autodiff engine, and a finite-difference gradient checker.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in f32
//! for training and f64 for gradient checking.

pub mod gradcheck;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::{Rng, Stream};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
