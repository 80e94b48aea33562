//! Dense visible/thermal image registration.
//!
//! The pipeline splits each image into low- and high-frequency parts, encodes
//! them with a convolutional local branch and a pyramid-pooling attention
//! branch, estimates cross-modal correspondences in both directions, and decodes
//! a full-resolution optical flow through a global matching layer followed by
//! five refinement blocks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod correspondence;
pub mod dataset;
pub mod decompose;
pub mod encoders;
mod error;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
