//! Preference-steered text-to-3D human optimization over Gaussian splats.
//!
//! A Gaussian cloud is initialized on a skinned body mesh and refined with
//! score-distillation gradients from a noise predictor, plus a contrastive
//! preference term: an inverse-score weighted ensemble of scorers on the
//! prompt, and a repulsive term on a constructed negation prompt.

// Per-axis index loops mirror the math; `!(a > b)` comparisons are deliberate NaN rejection.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod body_model;
pub mod conformance;
pub mod guidance;
pub mod image;
pub mod keyed;
pub mod mock_server;
pub mod negation;
pub mod preference;
pub mod prompts;
pub mod protocol;
pub mod real;
pub mod splat_render;
pub mod trainer;

pub use image::Image;
pub use real::Real;
