//! Dynamic-depth transformer encoders with input-conditioned layer dropping.
//!
//! The crate trains small transformer encoders in 64-bit floats through a
//! tape-based reverse-mode autodiff engine, and lets a lightweight selector
//! network decide per input which encoder layers to execute. Random-dropping
//! and entropy-based early-exit baselines, CTC and classification heads,
//! synthetic datasets, and analytic MAC accounting round out the toolkit.

pub mod audio;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gating;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{CoreError, Result};
pub use tensor::Tensor;
