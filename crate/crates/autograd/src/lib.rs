//! Dense `f64` matrices, an eager reverse-mode tape, parameter storage and Adam.
//!
//! Everything runs in 64-bit so finite-difference checks can resolve relative
//! errors well below `1e-4`.

pub mod gradcheck;
mod graph;
mod matrix;
mod params;

pub use graph::{log_sum_exp, sigmoid, softmax_rows, Gradients, Graph, Var};
pub use matrix::Matrix;
pub use params::{Adam, ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
}
