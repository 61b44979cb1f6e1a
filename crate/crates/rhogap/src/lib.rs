//! Task-aware data valuation for learning-based control with multi-output
//! Gaussian-process models: coregionalized GP regression, uniform error
//! bounds, stability-requirement gaps, greedy subset selection, and a
//! closed-loop tracking benchmark.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod measure;
pub mod select;
pub mod sim;

pub use error::{Error, Result};
