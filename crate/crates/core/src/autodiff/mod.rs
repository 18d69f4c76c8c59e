//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values are recorded on a [`Tape`] as they are computed; [`Tape::backward`]
//! then walks the record in reverse and accumulates gradients. The
//! [`Var::stop_gradient`] operator returns a value-identical copy that blocks
//! gradient flow, which is how prefix tokens of negative candidates are
//! detached during alignment.
//!
//! ```
//! use raddpo_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var, Visibility};
pub use tensor::Tensor;

pub(crate) use tape::{
    axpy, dot, gelu, layer_norm_forward, log_softmax_row, matmul_into, sigmoid,
};
#[cfg(test)]
pub(crate) use tape::logsumexp;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
}
