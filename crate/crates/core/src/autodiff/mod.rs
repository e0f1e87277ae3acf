//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! The forward pass runs eagerly; every operation applied to a tensor that
//! lives on a [`Tape`] is recorded. [`backward`] walks the recorded
//! operations in reverse and builds adjoints *out of the same primitive
//! operations*, so under [`GradMode::SecondOrder`] the backward pass itself
//! is recorded and the returned gradients can be differentiated again.
//! This is what lets a meta-update differentiate through an inner
//! `θ' = θ − α∇L` step.
//!
//! A tape and its tensors are confined to one thread; independent tapes may
//! run concurrently.

mod tape;
mod tensor;


pub mod ops;

pub use tape::{backward, GradMode, OpKind, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tensor is not on the loss's tape")]
    NotOnTape,
}

pub type AdResult<T> = Result<T, AdError>;

/// Central-difference gradient estimate, element by element.
///
/// Test oracle for [`backward`]; deliberately independent of the tape.
pub fn finite_diff<F>(f: F, at: &Tensor, step: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(step > 0.0, "finite_diff: step must be positive");
    let mut grad = vec![0.0; at.numel()];
    for i in 0..at.numel() {
        let mut plus = at.data().to_vec();
        let mut minus = at.data().to_vec();
        plus[i] += step;
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(at.shape().to_vec(), plus));
        let fm = f(&Tensor::from_vec(at.shape().to_vec(), minus));
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Tensor::from_vec(at.shape().to_vec(), grad)
}
