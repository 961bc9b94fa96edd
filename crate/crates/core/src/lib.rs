//! Conditional-instrument DeepGMM training for domain generalization under
//! demographic selection bias, with a structural-causal-model simulator and a
//! robustness/fairness metric suite.

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod models;
pub mod moments;
pub mod parallel;
pub mod scm;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
