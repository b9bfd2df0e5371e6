//! Mask-guided attention for occluded object detection.
//!
//! A small two-stage detector whose RoI features are re-weighted by a
//! learned spatial attention map. The attention branch is supervised by
//! coarse masks rasterized from visible-region boxes, and the classification
//! loss is re-weighted per proposal by how occluded it is. Evaluation follows
//! the miss-rate versus false-positives-per-image protocol.

pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod mga;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
