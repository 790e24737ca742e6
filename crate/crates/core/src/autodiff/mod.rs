//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its output value plus whatever its backward rule needs;
//! [`Tape::backward`] walks the nodes in reverse and returns the gradients
//! of every leaf created with [`Tape::param`].

mod kernels;
mod optim;
mod tape;

pub use optim::OptimizerState;
pub use tape::{Gradients, OpKind, PairIndex, Tape, Var};

pub(crate) use tape::{contrastive_value, divergence_value};

/// Default epsilon for [`Tape::l2_normalize`].
pub const L2_EPS: f64 = 1e-12;
