//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{gelu, BackwardFn, Gradients, Graph, Var};
pub use tensor::{kl_divergence, softmax, Scalar, Tensor, KL_PROB_FLOOR};

/// LayerNorm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-5;
