//! Dense arrays, spherical geometry, and the reverse-mode gradient tape.

mod array;
mod fd;
mod tape;

pub use array::{angle, slerp, DenseArray, UnitVector, COS_CLAMP, SLERP_MIN_ANGLE};
pub use fd::{finite_difference_check, FdReport};
pub use tape::{GradientTape, Gradients, ParamId, ParamStore, Var};

use thiserror::Error;

/// Failures in low-level numeric routines.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("cannot normalize a vector with norm {norm} (threshold 1e-12)")]
    ZeroNorm { norm: f64 },

    #[error("{context}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("expected a unit vector, got norm {norm}")]
    NotUnit { norm: f64 },

    #[error("non-finite value encountered during {context}")]
    NonFiniteValue { context: &'static str },

    #[error("non-finite gradient for parameter '{param}'")]
    NonFiniteGradient { param: String },
}
