//! Multi-branch domain-adversarial training for tabular multimodal sensor
//! features, with shift analysis, baselines and an experiment runner.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod numeric;
pub mod rng;
pub mod shift;
pub mod training;

pub use error::{Error, Result};
