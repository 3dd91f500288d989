//! Statistical evaluation toolkit for image fear-rating prediction.

pub mod attribution;
pub mod curvefit;
pub mod data;
pub mod error;
pub mod error_analysis;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod qc;
pub mod reliability;
pub mod report;
pub mod ridge;
pub mod rng;
pub mod special;
pub mod stats;
pub mod svg;
pub mod synth;

pub use error::{Error, Result};
