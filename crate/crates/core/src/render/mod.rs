//! Differentiable tile-based rasterizer.
//!
//! Splats are projected, sorted once per view by center depth (stable by index),
//! binned into 16x16 tiles and alpha-composited front to back per pixel:
//!
//! ```text
//! σᵢ = min(αᵢ G'ᵢ(x), 0.99)      Tᵢ = Πⱼ<ᵢ (1 − σⱼ)
//! C = Σ cᵢ σᵢ Tᵢ + bg (1 − m)    D = Σ dᵢ σᵢ Tᵢ    m = Σ σᵢ Tᵢ
//! ```
//!
//! Compositing of a pixel stops before contributor `i` once `Tᵢ < 1e-4`.
//! [`render_backward`] returns exact gradients of
//! `⟨g_C, C⟩ + ⟨g_D, D⟩ + ⟨g_m, m⟩` w.r.t. every stored splat parameter.

mod mask;
mod project;
mod raster;

pub use mask::project_bbox_mask;
pub use project::{project, ProjectedSplat, ELLIPSE_99_SIGMA};
pub use raster::{render, render_backward, render_with, RenderOutput};

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub tile_size: usize,
    /// Contributions with σ below this are skipped; also sets each splat's screen extent.
    pub min_alpha: f64,
    pub max_alpha: f64,
    pub min_transmittance: f64,
    /// Isotropic screen-space variance (px²) added to every projected covariance.
    pub low_pass: f64,
    pub parallel: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            min_alpha: 1.0 / 255.0,
            max_alpha: 0.99,
            min_transmittance: 1e-4,
            low_pass: 0.3,
            parallel: true,
        }
    }
}

impl RenderSettings {
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }
}

/// Gradient w.r.t. one splat's stored parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGradient {
    pub position: Vector3<f64>,
    /// W.r.t. the raw `(w, x, y, z)` quaternion; tangent to the unit sphere.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh_dc: Vector3<f64>,
}

impl Default for SplatGradient {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            rotation: [0.0; 4],
            log_scale: Vector3::zeros(),
            opacity_logit: 0.0,
            sh_dc: Vector3::zeros(),
        }
    }
}

impl SplatGradient {
    pub const LEN: usize = 14;

    /// Flattened in the PLY property order: position, sh_dc, opacity, log_scale, rotation.
    pub fn to_array(&self) -> [f64; Self::LEN] {
        let p = &self.position;
        let c = &self.sh_dc;
        let s = &self.log_scale;
        let q = &self.rotation;
        [
            p.x,
            p.y,
            p.z,
            c.x,
            c.y,
            c.z,
            self.opacity_logit,
            s.x,
            s.y,
            s.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }

    pub fn add_scaled(&mut self, other: &SplatGradient, k: f64) {
        self.position += other.position * k;
        for (a, b) in self.rotation.iter_mut().zip(&other.rotation) {
            *a += b * k;
        }
        self.log_scale += other.log_scale * k;
        self.opacity_logit += other.opacity_logit * k;
        self.sh_dc += other.sh_dc * k;
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Reads or writes a stored splat parameter by its flattened index (see
/// [`SplatGradient::to_array`]).
pub fn splat_param_mut(s: &mut crate::scene::GaussianSplat, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut s.position[k],
        3..=5 => &mut s.sh_dc[k - 3],
        6 => &mut s.opacity_logit,
        7..=9 => &mut s.log_scale[k - 7],
        10..=13 => &mut s.rotation[k - 10],
        _ => panic!("splat parameter index {k} out of range"),
    }
}
