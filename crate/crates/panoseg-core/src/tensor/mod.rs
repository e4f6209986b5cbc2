//! Minimal dense-tensor math with reverse-mode differentiation.
//!
//! Everything the attention stack needs and nothing more: row-major flat
//! buffers, a single-threaded [`Tape`] that records forward ops and replays
//! them backwards, and a finite-difference checker that stays independent of
//! the backward rules it audits. Tensors are immutable once created; only
//! gradient buffers mutate. Any op that would produce a non-finite value
//! reports an error instead of letting NaNs propagate silently.

pub mod grad_check;
pub mod kernels;
mod tape;

pub use grad_check::finite_diff_check;
pub use tape::{Tape, TensorId};

use std::fmt;

/// Floating-point element type for tensors. Training and inference run in
/// `f32`; `f64` exists for gradient checking only.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// Errors emitted by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    LossNotScalar { got: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: invalid argument: {what}")]
    InvalidArgument { op: &'static str, what: String },
}
