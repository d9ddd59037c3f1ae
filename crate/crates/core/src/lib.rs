//! Synthetic tree point clouds, side-view projection, a compact CNN
//! classifier, Finer-CAM saliency and tree-part attribution analysis.

pub mod attribmetrics;
pub mod camxai;
pub mod cloudio;
pub mod error;
pub mod micronet;
pub mod partition;
pub mod pipeline;
pub mod projector;
pub mod raster;
pub mod synthforest;

pub use error::{Error, Result};
