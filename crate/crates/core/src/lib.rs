//! Low-rank Kalman optimization for fine-tuning small networks.

pub mod baselines;
pub mod data;
pub mod dense_ekf;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optimizer;

pub use error::{Error, Result};
pub use linalg::Matrix;
