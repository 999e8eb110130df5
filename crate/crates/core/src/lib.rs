//! Uncertainty-aware, set-valued representation learning for partially
//! observed multiview records.
//!
//! Each record is encoded into a diagonal Gaussian posterior over a latent
//! state. Training combines masked reconstruction, cross-view consistency,
//! a contrastive term and variance regularization; predictions propagate
//! posterior uncertainty by Monte Carlo sampling.
//!
//! The numerical core is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which the CLI and checkpoints use.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod diffmath;
pub mod encoder;
pub mod gaussian;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod recovery;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod trainer;
pub mod viewgen;

pub use config::RunConfig;
pub use encoder::PatientRecord;
pub use scalar::Scalar;

pub type Tensor64 = diffmath::Tensor<f64>;
pub type Tape64 = diffmath::Tape<f64>;
pub type Posterior = gaussian::GaussianPosterior<f64>;
pub type Model64 = model::Model<f64>;
pub type Tensor32 = diffmath::Tensor<f32>;
pub type Posterior32 = gaussian::GaussianPosterior<f32>;
pub type Model32 = model::Model<f32>;
