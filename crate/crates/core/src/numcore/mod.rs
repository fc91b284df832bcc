//! Dense `f64` tensors, reverse-mode autodiff and the finite-difference
//! gradient oracle.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_coords, finite_diff_grad, rel_err, DEFAULT_STEP, GRAD_REL_TOL};
pub use optim::Adam;
pub use rng::SeededRng;
pub use tape::{fault, BackwardRule, Gradients, OpKind, Tape, TapeNode, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}
