//! Tensor engine: dense arrays, a differentiation tape, seeded randomness
//! and finite-difference verification.

mod gradcheck;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheckReport};
pub use real::{Precision, Real};
pub use rng::RngStream;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
