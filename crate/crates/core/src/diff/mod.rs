//! Exact differentiation: forward-mode tangents for input derivatives,
//! a recorded trace with reverse accumulation for parameter gradients.

mod graph;
mod mat;
mod net;
mod params;
mod tape;

pub use graph::{Bound, Eval, Graph};
pub use mat::Mat;
pub use net::{forward_scalar, input_jacobian, Activation, DualBatch, Mlp, NetworkSpec};
pub use params::{Layout, LayoutBuilder, ParamVector, SliceDesc};
pub use tape::{Gradients, Tape, UnaryOp, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("output is {rows}x{cols}, expected a scalar")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-differentiable elementary op `{0}`")]
    NonDifferentiable(String),
    #[error("invalid parameter layout: {0}")]
    Layout(String),
}

/// `dLoss/dparams` for a loss recorded on `tape` with `bound` parameters.
pub fn param_gradient(tape: &Tape, loss: &Var, bound: &Bound<Var>) -> Result<ParamVector, DiffError> {
    Ok(tape.backward(loss)?.params(bound))
}
