//! Boundary-aware two-stream segmentation network with a self-contained
//! reverse-mode differentiation core.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod manifest;
pub mod nn;
pub mod params;
pub mod pgm;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{BoundParams, ParameterStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
