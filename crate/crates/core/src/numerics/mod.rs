//! Dense tensors, deterministic randomness, reverse-mode differentiation and
//! the `AVTK` tensor file format.

mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;
pub mod tensor_file;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Unary, Var};
pub use real::Real;
pub use rng::{mix_seed, Rng};
pub use tensor::Tensor;
