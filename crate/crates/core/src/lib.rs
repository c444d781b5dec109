//! Metric periocular depth estimation.
//!
//! The crate covers the whole desk-scale loop: a procedural periocular
//! scene renderer with exact ground truth, a five-level encoder-decoder
//! depth network trained with the reverse Huber loss, block-MAE scene
//! calibration, frame gating with robust multi-map aggregation, and metric
//! pupil measurement through pinhole back-projection.

pub mod calib;
pub mod camera;
pub mod error;
pub mod image;
pub mod network;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
