use std::fmt;
use std::sync::Arc;

use super::{ConditionBundle, DiffusionPrior, NoiseSchedule, SdsConfig};
use crate::error::{Error, Result};
use crate::image::Image;

type MeanFn = dyn Fn(&ConditionBundle) -> Result<Image> + Send + Sync;

/// Where the prior's data mean comes from.
#[derive(Clone)]
pub enum MeanSource {
    Fixed(Image),
    /// The bundle's reference image, or `fallback` when there is none.
    Reference { fallback: Image },
    /// Computed per query from the bundle, e.g. a ground-truth render at the
    /// bundle's relative pose.
    Custom(Arc<MeanFn>),
}

impl fmt::Debug for MeanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanSource::Fixed(m) => write!(f, "Fixed({:?})", m.shape()),
            MeanSource::Reference { fallback } => write!(f, "Reference({:?})", fallback.shape()),
            MeanSource::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Exact denoiser for data distributed as `N(μ̄, σ² I)` in an identity latent space:
///
/// ```text
/// ε̂(x_t, t) = √(1−ᾱ) (x_t − √ᾱ μ̄) / (ᾱ σ² + 1 − ᾱ)
/// ```
///
/// With `σ = 0` this is `(x_t − √ᾱ μ̄)/√(1−ᾱ)`. Only the first `channels` of the
/// input are read, so concatenated conditioning is ignored; a control `mid`
/// residual, if present, is added to the prediction.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianPrior {
    schedule: NoiseSchedule,
    source: MeanSource,
    variance: f64,
    channels: usize,
}

impl AnalyticGaussianPrior {
    pub fn new(schedule: NoiseSchedule, mean: Image, variance: f64) -> Result<Self> {
        let channels = mean.channels();
        Self::build(schedule, MeanSource::Fixed(mean), variance, channels)
    }

    pub fn following_reference(schedule: NoiseSchedule, fallback: Image, variance: f64) -> Result<Self> {
        let channels = fallback.channels();
        Self::build(schedule, MeanSource::Reference { fallback }, variance, channels)
    }

    pub fn with_mean_fn(
        schedule: NoiseSchedule,
        channels: usize,
        variance: f64,
        mean: impl Fn(&ConditionBundle) -> Result<Image> + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::build(schedule, MeanSource::Custom(Arc::new(mean)), variance, channels)
    }

    fn build(schedule: NoiseSchedule, source: MeanSource, variance: f64, channels: usize) -> Result<Self> {
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::invalid("prior variance must be finite and nonnegative"));
        }
        if channels == 0 {
            return Err(Error::invalid("prior mean needs at least one channel"));
        }
        Ok(Self {
            schedule,
            source,
            variance,
            channels,
        })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    fn mean_for(&self, cond: &ConditionBundle) -> Result<Image> {
        match &self.source {
            MeanSource::Fixed(m) => Ok(m.clone()),
            MeanSource::Reference { fallback } => Ok(cond.reference_image.clone().unwrap_or_else(|| fallback.clone())),
            MeanSource::Custom(f) => f(cond),
        }
    }

    fn denom(&self, ab: f64) -> f64 {
        ab * self.variance + 1.0 - ab
    }

    /// Per-timestep coefficients of the single-sample SDS residual
    /// `w(t)(ε̂ − ε) = a_t (x − μ̄) + b_t ε`.
    fn residual_coefficients(&self, t: usize, cfg: &SdsConfig) -> Result<(f64, f64)> {
        let ab = self.schedule.alpha_bar(t)?;
        let w = cfg.weight.eval(ab);
        let d = self.denom(ab);
        Ok((w * ab.sqrt() * (1.0 - ab).sqrt() / d, w * ((1.0 - ab) / d - 1.0)))
    }

    /// Closed-form mean and per-element variance of [`super::sds_grad`] at `x`
    /// for a fixed-mean prior, averaging over the uniform integer timestep range.
    pub fn sds_moments(&self, x: &Image, cfg: &SdsConfig) -> Result<(Image, Image)> {
        let MeanSource::Fixed(mean) = &self.source else {
            return Err(Error::invalid("closed-form moments need a fixed mean"));
        };
        x.check_shape(mean, "image")?;
        let (lo, hi) = cfg.timestep_range(self.schedule.len())?;
        let n = (hi - lo + 1) as f64;
        let (mut ea, mut ea2, mut eb2) = (0.0, 0.0, 0.0);
        for t in lo..=hi {
            let (a, b) = self.residual_coefficients(t, cfg)?;
            ea += a / n;
            ea2 += a * a / n;
            eb2 += b * b / n;
        }
        let diff = x.zip_map(mean, |a, b| a - b)?;
        Ok((diff.map(|d| ea * d), diff.map(|d| (ea2 - ea * ea) * d * d + eb2)))
    }
}

impl DiffusionPrior for AnalyticGaussianPrior {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_noise(&self, x_t: &Image, t: usize, cond: &ConditionBundle) -> Result<Image> {
        let mean = self.mean_for(cond)?;
        let (w, h, c) = (x_t.width(), x_t.height(), self.channels);
        if mean.shape() != (w, h, c) || x_t.channels() < c {
            return Err(Error::GuidanceUnavailable(format!(
                "analytic prior mean {:?} does not fit input {:?}",
                mean.shape(),
                x_t.shape()
            )));
        }
        let ab = self.schedule.alpha_bar(t)?;
        let (sa, k) = (ab.sqrt(), (1.0 - ab).sqrt() / self.denom(ab));
        let mid = cond.control.as_ref().map(|r| &r.mid);
        if let Some(m) = mid {
            if m.shape() != (w, h, c) {
                return Err(Error::GuidanceUnavailable("control residual shape mismatch".into()));
            }
        }
        Ok(Image::from_fn(w, h, c, |x, y, ch| {
            let e = k * (x_t.get(x, y, ch) - sa * mean.get(x, y, ch));
            e + mid.map_or(0.0, |m| m.get(x, y, ch))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{cfg_combine, sds_grad};
    use approx::assert_relative_eq;

    #[test]
    fn point_mass_denoiser_matches_textbook_form() {
        let s = NoiseSchedule::default();
        let mean = Image::filled(3, 2, 3, 0.25);
        let prior = AnalyticGaussianPrior::new(s.clone(), mean.clone(), 0.0).unwrap();
        let x_t = Image::from_fn(3, 2, 3, |x, y, c| (x + y + c) as f64 * 0.1);
        let t = 321;
        let ab = s.alpha_bar(t).unwrap();
        let got = prior.predict_noise(&x_t, t, &ConditionBundle::default()).unwrap();
        for (g, xv) in got.data().iter().zip(x_t.data()) {
            assert_relative_eq!(*g, (xv - ab.sqrt() * 0.25) / (1.0 - ab).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn point_mass_gradient_is_deterministic_multiple_of_offset() {
        let mean = Image::filled(4, 4, 3, 0.5);
        let x = Image::from_fn(4, 4, 3, |x, _, c| x as f64 * 0.2 + c as f64 * 0.05);
        let prior = AnalyticGaussianPrior::new(NoiseSchedule::default(), mean.clone(), 0.0).unwrap();
        let g = sds_grad(&prior, &x, &ConditionBundle::default(), &SdsConfig::default()).unwrap();
        let ratio: Vec<f64> = g
            .grad
            .data()
            .iter()
            .zip(x.data().iter().zip(mean.data()))
            .filter(|(_, (a, b))| (*a - *b).abs() > 1e-9)
            .map(|(g, (a, b))| g / (a - b))
            .collect();
        assert!(ratio.iter().all(|r| (r - ratio[0]).abs() < 1e-9 && *r > 0.0));
    }

    #[test]
    fn reference_mean_is_used_when_present() {
        let fallback = Image::new(2, 2, 3);
        let prior = AnalyticGaussianPrior::following_reference(NoiseSchedule::default(), fallback, 0.0).unwrap();
        let reference = Image::filled(2, 2, 3, 0.8);
        let x = Image::filled(2, 2, 3, 0.3);
        let cond = ConditionBundle {
            reference_image: Some(reference),
            ..Default::default()
        };
        let g = sds_grad(&prior, &x, &cond, &SdsConfig::default()).unwrap();
        assert!(g.grad.data().iter().all(|&v| v < 0.0));
        let g0 = sds_grad(&prior, &x, &ConditionBundle::default(), &SdsConfig::default()).unwrap();
        assert!(g0.grad.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn guidance_mixes_reference_and_fallback() {
        let s = NoiseSchedule::default();
        let prior = AnalyticGaussianPrior::following_reference(s, Image::new(1, 1, 3), 0.0).unwrap();
        let cond = ConditionBundle {
            reference_image: Some(Image::filled(1, 1, 3, 1.0)),
            ..Default::default()
        };
        let x_t = Image::filled(1, 1, 3, 0.4);
        let c = prior.predict_noise(&x_t, 100, &cond).unwrap();
        let u = prior.predict_noise(&x_t, 100, &ConditionBundle::default()).unwrap();
        let mixed = cfg_combine(&c, &u, 2.0).unwrap();
        assert_relative_eq!(mixed.data()[0], 3.0 * c.data()[0] - 2.0 * u.data()[0], epsilon = 1e-12);
    }

    #[test]
    fn moments_need_fixed_mean() {
        let prior =
            AnalyticGaussianPrior::following_reference(NoiseSchedule::default(), Image::new(1, 1, 3), 1.0).unwrap();
        assert!(prior.sds_moments(&Image::new(1, 1, 3), &SdsConfig::default()).is_err());
    }
}
