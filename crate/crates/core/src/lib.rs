//! Serial-crystallography frame reduction: peak finding, ROI extraction,
//! background binning and error-bounded lossy compression.

pub mod bench;
pub mod binning;
pub mod codec;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod parallel;
pub mod peakfind;
pub mod pipeline;
pub mod roi;
pub mod tuner;

pub use error::{Error, Result};
