//! Trajectory forecasting under partial observation with two-branch
//! self-distillation: scenario generation, masking, the attention model,
//! training and evaluation metrics.

pub mod checkpoint;
pub mod context;
pub mod decoder;
pub mod distillation;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scenario;
pub mod targets;

pub use error::{Error, Result};
pub use tsd_autograd as autograd;
