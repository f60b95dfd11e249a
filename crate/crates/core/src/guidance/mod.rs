//! Score distillation over a pluggable diffusion prior.
//!
//! A [`DiffusionPrior`] predicts the noise in a noised latent. The SDS family of
//! functions sample a timestep and a noise draw from a seeded RNG, noise the encoded
//! render, query the prior (twice under classifier-free guidance) and return the
//! image-space factor `w(t)(ε̂ − ε)` pulled back through the prior's codec.
//! Chaining that factor through the renderer is the optimizer's job.

mod analytic;
pub mod remote;
mod sds;

pub use analytic::{AnalyticGaussianPrior, MeanSource};
pub use sds::{
    di_sds_grad, neutralize_masked, pool_mask, sds_grad, sds_grad_3d, sds_grad_with_rng, ControlProvider,
    DiSdsInputs, SdsSample, ZeroControl,
};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::anchor::orbit_coordinates;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::Camera;

/// Cumulative signal fractions `ᾱ_t` of a discrete diffusion schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in square-root space between `beta_start` and `beta_end`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("betas must satisfy 0 < start <= end < 1"));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let beta = (a + (b - a) * i as f64 / (steps - 1) as f64).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { alphas_cumprod })
    }

    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if let Some(i) = alphas_cumprod.iter().position(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid(format!("alpha_bar[{i}] outside (0, 1]")));
        }
        Ok(Self { alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of length {}", self.len())))
    }
}

impl Default for NoiseSchedule {
    /// 1000-step scaled-linear schedule with betas 0.00085..0.012.
    fn default() -> Self {
        Self::scaled_linear(1000, 0.00085, 0.012).expect("valid constants")
    }
}

/// Pose of a sampled camera relative to the anchor, measured around the edit center.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RelativePose {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

impl RelativePose {
    /// `camera − anchor` in orbit coordinates around `center`; azimuth wrapped to `(-180, 180]`.
    pub fn between(camera: &Camera, anchor: &Camera, center: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let (az, el, r) = orbit_coordinates(&camera.eye(), center, up)?;
        let (az0, el0, r0) = orbit_coordinates(&anchor.eye(), center, up)?;
        Ok(Self {
            azimuth_deg: wrap_degrees(az - az0),
            elevation_deg: el - el0,
            radius: r - r0,
        })
    }
}

fn wrap_degrees(d: f64) -> f64 {
    let w = d.rem_euclid(360.0);
    if w > 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Control-branch residuals: one block per down stage plus the middle block,
/// each at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlResiduals {
    pub down: Vec<Image>,
    pub mid: Image,
}

/// Everything a prior may be conditioned on. An empty bundle is the
/// unconditional branch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionBundle {
    /// Opaque text handle; the prior owns the embedding.
    pub text: Option<String>,
    pub reference_image: Option<Image>,
    pub relative_pose: Option<RelativePose>,
    /// Inverted depth in `[0, 1]`.
    pub depth: Option<Image>,
    /// Binary mask at latent resolution.
    pub bbox_mask: Option<Image>,
    pub masked_image_latents: Option<Image>,
    pub control: Option<ControlResiduals>,
}

impl ConditionBundle {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            text: Some(prompt.into()),
            ..Default::default()
        }
    }

    pub fn is_unconditional(&self) -> bool {
        self.keys().is_empty()
    }

    /// Names of the conditions present, in a fixed order.
    pub fn keys(&self) -> Vec<&'static str> {
        let mut k = Vec::new();
        let present = [
            ("text", self.text.is_some()),
            ("reference_image", self.reference_image.is_some()),
            ("relative_pose", self.relative_pose.is_some()),
            ("depth", self.depth.is_some()),
            ("bbox_mask", self.bbox_mask.is_some()),
            ("masked_image_latents", self.masked_image_latents.is_some()),
            ("control", self.control.is_some()),
        ];
        for (name, on) in present {
            if on {
                k.push(name);
            }
        }
        k
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.depth {
            if d.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("depth condition must lie in [0, 1]"));
            }
        }
        if let Some(m) = &self.bbox_mask {
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid("bbox mask condition must be binary"));
            }
        }
        Ok(())
    }
}

/// Diffusion model contract. Implementations must be deterministic in their inputs.
pub trait DiffusionPrior: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// Image to latent. Identity for image-space priors.
    fn encode(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }

    /// Vector-Jacobian product of [`encode`](Self::encode) at `image`.
    fn encode_backward(&self, image: &Image, latent_grad: &Image) -> Result<Image> {
        latent_grad.check_shape(image, "latent gradient")?;
        Ok(latent_grad.clone())
    }

    /// Predicted noise for `x_t`. The first channels of `x_t` are the noised
    /// latent; anything after them is concatenated conditioning. The result has
    /// the latent's channel count.
    fn predict_noise(&self, x_t: &Image, t: usize, cond: &ConditionBundle) -> Result<Image>;
}

/// Timestep weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFn {
    Constant,
    #[default]
    OneMinusAlphabar,
}

impl WeightFn {
    pub fn eval(self, alpha_bar: f64) -> f64 {
        match self {
            WeightFn::Constant => 1.0,
            WeightFn::OneMinusAlphabar => 1.0 - alpha_bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdsConfig {
    /// Lower timestep bound as a fraction of the schedule length.
    pub t_min: f64,
    /// Upper timestep bound as a fraction of the schedule length.
    pub t_max: f64,
    /// If set, [`SdsConfig::at_progress`] lowers `t_max` linearly to this value.
    pub t_max_end: Option<f64>,
    pub weight: WeightFn,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
            t_max_end: Some(0.5),
            weight: WeightFn::default(),
            guidance_scale: 0.0,
            seed: 0,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::invalid(format!(
                "timestep bounds must satisfy 0 < t_min < t_max <= 1, got {} and {}",
                self.t_min, self.t_max
            )));
        }
        if let Some(end) = self.t_max_end {
            if !(self.t_min < end && end <= 1.0) {
                return Err(Error::invalid("annealed t_max must stay above t_min"));
            }
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::invalid("guidance scale must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Copy with `t_max` annealed to `progress ∈ [0, 1]` of the run.
    pub fn at_progress(&self, progress: f64) -> SdsConfig {
        let mut c = self.clone();
        if let Some(end) = self.t_max_end {
            c.t_max = self.t_max + (end - self.t_max) * progress.clamp(0.0, 1.0);
        }
        c
    }

    pub fn with_seed(&self, seed: u64) -> SdsConfig {
        SdsConfig { seed, ..self.clone() }
    }

    /// Inclusive integer timestep range for a schedule of `len` steps.
    pub fn timestep_range(&self, len: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let to_step = |f: f64| ((f * len as f64).round() as usize).min(len - 1);
        let (lo, hi) = (to_step(self.t_min).max(1), to_step(self.t_max));
        if lo > hi {
            return Err(Error::invalid("timestep range is empty for this schedule"));
        }
        Ok((lo, hi))
    }
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`.
pub fn add_noise(schedule: &NoiseSchedule, x0: &Image, t: usize, noise: &Image) -> Result<Image> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |x, e| a * x + b * e)
}

/// `ε̂ = ε_c + s (ε_c − ε_u)`.
pub fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, s: f64) -> Result<Image> {
    eps_cond.zip_map(eps_uncond, |c, u| c + s * (c - u))
}

/// Rescales depth over the masked pixels to `[0, 1]` and flips it so near is bright.
/// Pixels outside the mask are clamped into range. Constant depth maps to 0.5.
pub fn invert_depth(depth: &Image, mask: Option<&Image>) -> Result<Image> {
    if depth.channels() != 1 {
        return Err(Error::invalid("depth must be single-channel"));
    }
    if let Some(m) = mask {
        m.check_shape(depth, "depth mask")?;
    }
    let on = |i: usize| mask.is_none_or(|m| m.data()[i] >= 0.5);
    let (mut lo, mut hi, mut any) = (f64::INFINITY, f64::NEG_INFINITY, false);
    for (i, &d) in depth.data().iter().enumerate() {
        if on(i) {
            if !d.is_finite() {
                return Err(Error::invalid("depth is not finite on the mask"));
            }
            lo = lo.min(d);
            hi = hi.max(d);
            any = true;
        }
    }
    if !any {
        return Err(Error::Degenerate("depth mask is empty".into()));
    }
    if hi == lo {
        return Ok(depth.map(|_| 0.5));
    }
    let span = hi - lo;
    Ok(depth.map(|d| {
        if d.is_finite() {
            1.0 - ((d - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }))
}

/// Appends a view phrase chosen by the azimuth offset to the anchor, or
/// "overhead view" for cameras looking down from more than 60° of elevation.
pub fn view_conditioned_prompt(base: &str, camera: &Camera, anchor: &Camera, up: &Vector3<f64>) -> String {
    let up = up.try_normalize(1e-12).unwrap_or_else(Vector3::y);
    // Direction from the target back towards the eye.
    let back = |c: &Camera| -c.forward();
    let b = back(camera);
    let elevation = b.dot(&up).clamp(-1.0, 1.0).asin().to_degrees();
    let view = if elevation > 60.0 {
        "overhead view"
    } else {
        let flat = |v: Vector3<f64>| v - up * v.dot(&up);
        let (p, q) = (flat(b), flat(back(anchor)));
        let delta = if p.norm() < 1e-12 || q.norm() < 1e-12 {
            0.0
        } else {
            (p.normalize().dot(&q.normalize())).clamp(-1.0, 1.0).acos().to_degrees()
        };
        if delta < 45.0 {
            "front view"
        } else if delta <= 135.0 {
            "side view"
        } else {
            "back view"
        }
    };
    format!("{base}, photorealistic, {view}")
}
