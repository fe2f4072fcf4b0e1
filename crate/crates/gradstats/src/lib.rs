//! Reverse-mode automatic differentiation with a rewriteable gradient graph.
//!
//! The crate builds loss functions as explicit computational graphs,
//! differentiates them into gradient graphs, and then surgically rewrites
//! the final batch reductions of those gradient graphs so that per-example
//! gradient statistics (mean square, sign, magnitude powers) come out at
//! mini-batch-gradient cost wherever the gradient structure permits. On top
//! of that sit the Adam and Sign optimizer families driven by per-example
//! statistics, unbiased moment estimators, batch-size scaling-rule
//! calculus, and a desk-scale training harness.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod surgery;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, VarId};
pub use tensor::{ElemOp, Tensor};
