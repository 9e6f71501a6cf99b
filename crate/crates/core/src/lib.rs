//! Noise-conditional kernel SVGD with entropy regularization, its baselines,
//! score learning for small networks, and sample-quality metrics.

pub mod distributions;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod metrics;
pub mod samplers;
pub mod score_learning;

pub use distributions::{GaussianMixture, ParticleSet};
pub use error::{Error, Result};
