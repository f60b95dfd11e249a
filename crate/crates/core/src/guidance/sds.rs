use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    add_noise, cfg_combine, invert_depth, ConditionBundle, ControlResiduals, DiffusionPrior, RelativePose, SdsConfig,
};
use crate::error::{Error, Result};
use crate::image::Image;

/// One SDS draw: the image-space gradient and the sampled timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsSample {
    pub grad: Image,
    pub t: usize,
    pub weight: f64,
}

fn sample_noise(rng: &mut impl Rng, like: &Image) -> Image {
    let (w, h, c) = like.shape();
    Image::from_fn(w, h, c, |_, _, _| rng.sample(StandardNormal))
}

fn check_prediction(eps: &Image, latent: &Image) -> Result<()> {
    if eps.shape() != latent.shape() {
        return Err(Error::GuidanceUnavailable(format!(
            "prior returned shape {:?}, expected {:?}",
            eps.shape(),
            latent.shape()
        )));
    }
    if !eps.is_finite() {
        return Err(Error::GuidanceUnavailable("prior returned non-finite noise".into()));
    }
    Ok(())
}

/// Draws `t` then `ε`, in that order, so every SDS variant consumes the RNG identically.
fn draw(prior: &dyn DiffusionPrior, latent: &Image, cfg: &SdsConfig, rng: &mut impl Rng) -> Result<(usize, Image)> {
    let (lo, hi) = cfg.timestep_range(prior.schedule().len())?;
    let t = rng.random_range(lo..=hi);
    Ok((t, sample_noise(rng, latent)))
}

/// Shared tail: CFG, residual, weighting, pull-back through the codec.
#[allow(clippy::too_many_arguments)]
fn finish(
    prior: &dyn DiffusionPrior,
    rendered: &Image,
    latent: &Image,
    eps: &Image,
    t: usize,
    eps_cond: Image,
    uncond_input: Option<&Image>,
    cfg: &SdsConfig,
) -> Result<SdsSample> {
    check_prediction(&eps_cond, latent)?;
    let eps_hat = match uncond_input {
        Some(x) if cfg.guidance_scale > 0.0 => {
            let eps_uncond = prior.predict_noise(x, t, &ConditionBundle::default())?;
            check_prediction(&eps_uncond, latent)?;
            cfg_combine(&eps_cond, &eps_uncond, cfg.guidance_scale)?
        }
        _ => eps_cond,
    };
    let weight = cfg.weight.eval(prior.schedule().alpha_bar(t)?);
    let latent_grad = eps_hat.zip_map(eps, |a, b| weight * (a - b))?;
    let grad = prior.encode_backward(rendered, &latent_grad)?;
    grad.check_shape(rendered, "pulled-back gradient")?;
    Ok(SdsSample { grad, t, weight })
}

/// [`sds_grad`] drawing from a caller-owned RNG.
pub fn sds_grad_with_rng(
    prior: &dyn DiffusionPrior,
    rendered: &Image,
    cond: &ConditionBundle,
    cfg: &SdsConfig,
    rng: &mut impl Rng,
) -> Result<SdsSample> {
    cond.validate()?;
    let latent = prior.encode(rendered)?;
    let (t, eps) = draw(prior, &latent, cfg, rng)?;
    let x_t = add_noise(prior.schedule(), &latent, t, &eps)?;
    let eps_cond = prior.predict_noise(&x_t, t, cond)?;
    finish(prior, rendered, &latent, &eps, t, eps_cond, Some(&x_t), cfg)
}

/// Single-sample SDS gradient `w(t)(ε̂ − ε)` in image space, seeded by `cfg.seed`.
pub fn sds_grad(prior: &dyn DiffusionPrior, rendered: &Image, cond: &ConditionBundle, cfg: &SdsConfig) -> Result<SdsSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sds_grad_with_rng(prior, rendered, cond, cfg, &mut rng)
}

/// SDS under a view-conditioned prior: conditioned on the reference image and
/// the sampled view's pose relative to it instead of text.
pub fn sds_grad_3d(
    prior: &dyn DiffusionPrior,
    rendered: &Image,
    reference: &Image,
    relative_pose: RelativePose,
    cfg: &SdsConfig,
) -> Result<SdsSample> {
    let cond = ConditionBundle {
        reference_image: Some(reference.clone()),
        relative_pose: Some(relative_pose),
        ..Default::default()
    };
    sds_grad(prior, rendered, &cond, cfg)
}

/// Source of control residuals for the depth-guided branch.
pub trait ControlProvider: Send + Sync {
    /// `None` means the base prior derives control from the bundle's depth itself.
    fn residuals(&self, x_t: &Image, t: usize, cond: &ConditionBundle, depth: &Image) -> Result<Option<ControlResiduals>>;
}

/// Control branch contributing nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl ControlProvider for ZeroControl {
    fn residuals(&self, x_t: &Image, _t: usize, _cond: &ConditionBundle, _depth: &Image) -> Result<Option<ControlResiduals>> {
        Ok(Some(ControlResiduals {
            down: Vec::new(),
            mid: Image::new(x_t.width(), x_t.height(), x_t.channels()),
        }))
    }
}

/// Render-side inputs of a DI-SDS query, all at image resolution.
#[derive(Debug, Clone)]
pub struct DiSdsInputs {
    /// Merged object and background render.
    pub rendered: Image,
    /// Single-channel raw depth.
    pub depth_raw: Option<Image>,
    /// Binary projected bounding-box mask.
    pub bbox_mask: Option<Image>,
    /// `rendered` with the masked region neutralized; see [`neutralize_masked`].
    pub background_image: Image,
}

/// Sets every masked pixel to 0.
pub fn neutralize_masked(image: &Image, mask: &Image) -> Result<Image> {
    image.mul_mask(&mask.map(|m| if m >= 0.5 { 0.0 } else { 1.0 }))
}

/// Downsamples a binary mask by an integer factor; a cell is on if any pixel in it is.
pub fn pool_mask(mask: &Image, width: usize, height: usize) -> Result<Image> {
    if mask.width() == width && mask.height() == height {
        return Ok(mask.map(|m| if m >= 0.5 { 1.0 } else { 0.0 }));
    }
    if width == 0 || height == 0 || !mask.width().is_multiple_of(width) || !mask.height().is_multiple_of(height) {
        return Err(Error::invalid(format!(
            "cannot pool a {}x{} mask to {width}x{height}",
            mask.width(),
            mask.height()
        )));
    }
    let (kx, ky) = (mask.width() / width, mask.height() / height);
    Ok(Image::from_fn(width, height, 1, |x, y, _| {
        let hit = (0..ky).any(|dy| (0..kx).any(|dx| mask.get(x * kx + dx, y * ky + dy, 0) >= 0.5));
        if hit {
            1.0
        } else {
            0.0
        }
    }))
}

/// Depth-guided inpainting SDS. The conditional branch sees `(x_t, m, m_l)`
/// concatenated channelwise plus depth control; the unconditional branch sees
/// `x_t` zero-padded to the same width. The result is zero outside the mask.
pub fn di_sds_grad(
    base: &dyn DiffusionPrior,
    control: &dyn ControlProvider,
    inputs: &DiSdsInputs,
    cond: &ConditionBundle,
    cfg: &SdsConfig,
) -> Result<SdsSample> {
    let depth_raw = inputs.depth_raw.as_ref().ok_or_else(|| Error::invalid("DI-SDS needs a depth image"))?;
    let mask = inputs.bbox_mask.as_ref().ok_or_else(|| Error::invalid("DI-SDS needs a bbox mask"))?;
    let rendered = &inputs.rendered;
    if depth_raw.channels() != 1 || mask.channels() != 1 {
        return Err(Error::invalid("depth and mask must be single-channel"));
    }
    for (img, what) in [(depth_raw, "depth"), (mask, "bbox mask")] {
        if (img.width(), img.height()) != (rendered.width(), rendered.height()) {
            return Err(Error::invalid(format!("{what} resolution differs from the render")));
        }
    }
    inputs.background_image.check_shape(rendered, "background image")?;
    let image_mask = mask.map(|m| if m >= 0.5 { 1.0 } else { 0.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = base.encode(rendered)?;
    let (t, eps) = draw(base, &latent, cfg, &mut rng)?;
    let x_t = add_noise(base.schedule(), &latent, t, &eps)?;

    let depth = invert_depth(depth_raw, None)?;
    let latent_mask = pool_mask(&image_mask, latent.width(), latent.height())?;
    let masked_latents = base.encode(&inputs.background_image)?;
    let mut full = cond.clone();
    full.control = control.residuals(&x_t, t, cond, &depth)?;
    full.depth = Some(depth);
    full.bbox_mask = Some(latent_mask.clone());
    full.masked_image_latents = Some(masked_latents.clone());
    full.validate()?;

    let stacked = Image::concat_channels(&[&x_t, &latent_mask, &masked_latents])?;
    let eps_cond = base.predict_noise(&stacked, t, &full)?;
    let padding = Image::new(x_t.width(), x_t.height(), 1 + masked_latents.channels());
    let padded = Image::concat_channels(&[&x_t, &padding])?;
    let mut sample = finish(base, rendered, &latent, &eps, t, eps_cond, Some(&padded), cfg)?;
    sample.grad = sample.grad.mul_mask(&image_mask)?;
    Ok(sample)
}
