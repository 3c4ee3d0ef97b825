//! Two-stage Gaussian VAE with learnable decoder variance, synthetic manifold
//! benchmarks with analytic oracles, and a diagnostics suite.

pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod manifolds;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
