//! Text-guided object edits inside a box region of a 3D Gaussian splatting scene.
//!
//! The crate is organized bottom-up:
//!
//! - [`scene`]: splat data model, PLY persistence, bounding-box excision and merging.
//! - [`render`]: tile-parallel differentiable rasterizer (color, depth, accumulated opacity)
//!   with an analytic backward pass.
//! - [`anchor`]: anchor view proposal over an azimuth ring of cameras using the
//!   HSV value channel and rotation-normalized left/right brightness ratios.
//! - [`guidance`]: score distillation (plain, 3D-aware, depth-guided inpainting) over a
//!   pluggable [`guidance::DiffusionPrior`], classifier-free guidance, an analytic
//!   Gaussian prior and a remote prior client.
//! - [`optimize`]: sphere initialization, the coarse lifting loop, densification and
//!   pruning, and the texture enhancement loop.

// `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchor;
pub mod error;
pub mod guidance;
pub mod image;
pub mod optimize;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
pub use image::Image;
