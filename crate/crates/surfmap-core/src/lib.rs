//! Weakly-supervised category-specific surface mapping at desk scale.
//!
//! Given multi-view renders, masks and camera poses of one synthetic
//! category, the crate trains a small convolutional network that predicts
//! per-pixel UV coordinates, a segmentation map and an instance-specific
//! deformation of the category's average position map — supervised only by
//! reprojection, visibility, deformation-regularization and multi-view
//! consistency losses — and evaluates PCK/AUC against the generator's
//! ground truth.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod par;
pub mod synthgen;

pub use error::{Result, SurfmapError};
