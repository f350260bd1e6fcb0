//! Dense tensors and a reverse-mode differentiation tape, generic over the
//! scalar type so the same model code runs in f32 for speed and in f64 for
//! finite-difference verification.
//!
//! Everything is single-threaded and allocation-order deterministic: two runs
//! with the same inputs produce bitwise-identical values, gradients, and
//! optimizer states.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod real;
pub mod seed;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{AdamW, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
