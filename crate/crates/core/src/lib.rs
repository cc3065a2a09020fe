//! Anchor-free multi-scale object detection on a from-scratch CPU tensor
//! stack: feature pyramid with top-down fusion and a context module,
//! center-point label assignment with cross-level projection, stride-encoded
//! box regression, focal/Gaussian-weighted losses, an SGD trainer and a
//! centroid-based evaluation protocol.

pub mod error;
pub mod gradcheck;
pub mod nn;

pub use error::{Error, Result};
pub mod assign;
pub mod codec;
pub mod pyramid;
pub mod loss;
pub mod data;
pub mod eval;
pub mod train;
pub mod checkpoint;
