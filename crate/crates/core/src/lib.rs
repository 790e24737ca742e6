//! Attention-based ensembles for deep metric learning, with a small
//! reverse-mode autodiff engine, synthetic data, and retrieval evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod kv;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
