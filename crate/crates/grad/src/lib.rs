//! Reverse-mode automatic differentiation over dense, row-major `f64` tensors.
//!
//! The crate is deliberately small: a value type ([`Tensor`]), a single-owner
//! recording graph ([`Graph`]) with a fixed set of primitives, an [`Adam`]
//! optimizer, categorical-distribution helpers and a central-difference
//! gradient checker. Everything stochastic draws from an explicitly passed
//! [`rng::Rng`] stream.

pub mod adam;
pub mod check;
pub mod dist;
mod error;
mod gemm;
pub mod graph;
pub mod init;
pub mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use check::{check_gradients, primitive_suite, GradCheckReport};
pub use dist::{categorical_sample_logprob, log_softmax_row, softmax_row, CategoricalSample};
pub use error::GradError;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{argmax, Tensor};

pub type Result<T, E = GradError> = std::result::Result<T, E>;
