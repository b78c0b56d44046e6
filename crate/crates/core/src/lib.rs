//! Color-only stylization of pre-trained 3D Gaussian splatting scenes.
//!
//! Geometry (positions, rotations, scales, opacities) is frozen; only the
//! spherical-harmonic color coefficients are optimized against a composite of
//! score-distillation, multi-scale Gram, style-descriptor and quality losses.
//! Every neural prior sits behind a provider trait in [`priors`], with
//! deterministic toy backends for hermetic testing.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod dssd;
pub mod experts;
pub mod gs_model;
pub mod image;
pub mod metrics;
pub mod priors;
pub mod renderer;
pub mod scheduler;
pub mod style_cleaning;
pub mod trainer;

pub use gs_model::{ColorGradient, GaussianCloud};
pub use image::Image;
pub use renderer::{CameraView, RenderPlan};
pub use style_cleaning::StyleEmbedding;
