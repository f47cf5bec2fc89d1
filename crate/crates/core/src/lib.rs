//! Differentiable multi-view 3D human pose fusion.
//!
//! Per-view heatmaps are lifted through calibrated depth cameras into a
//! shared 3D frame and aggregated by a softmax centre of mass, so a 2D
//! heatmap predictor can be trained directly with a 3D joint-error loss.

pub mod augment;
pub mod data;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod heatmap;
pub mod matching;
pub mod pipeline;
pub mod tensorgrad;
