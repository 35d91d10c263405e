//! Human-in-the-loop active-learning workbench for binary image defect
//! classification.

pub mod active_learning;
pub mod autolabel;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod sweep;
pub mod synthetic;

pub use error::{Error, Result};
