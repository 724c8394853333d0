//! HSTMixer: a hierarchical all-MLP spatiotemporal mixer for large-scale
//! traffic forecasting, built on a small dense-tensor autodiff core.

pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod model;
pub mod nn;
#[cfg(test)]
mod oracle;
pub mod stblock;
pub mod tensor;
pub mod trainer;

pub use config::{Ablation, ModelConfig};
pub use error::{Error, ErrorKind, Result};
