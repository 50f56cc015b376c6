//! Differentiable 3D Gaussian splatting trainer with multi-scale
//! pseudo-ground-truth supervision.
//!
//! The crate covers the full desk-scale pipeline: scene and camera value
//! types, a tile-based differentiable rasterizer, zoom/crop camera
//! construction, the resampling checks that bound how much generated detail
//! a downsampled pixel tolerates, a pluggable detail synthesizer, and the
//! hybrid bootstrapping + upscaling training loop.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod camera_ops;
pub mod error;
pub mod image;
pub mod io;
pub mod pseudo_gt;
pub mod metrics;
pub mod raster;
pub mod resampling;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use camera::Camera;
pub use error::{Error, Result};
pub use image::{FloatImage, Image, QuantImage};
pub use scene::{Gaussian, Scene};
