//! Dense hybrid anomaly detection for open-set semantic segmentation.

pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod labels;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod raster;

pub use error::{Error, Result};
