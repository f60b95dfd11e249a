use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scene::{GaussianSplat, Scene, Tag};

/// Peak opacity of the initial sphere.
pub const INIT_MAX_OPACITY: f64 = 0.1;
/// Initial gray level.
pub const INIT_COLOR: f64 = 0.1;

/// `count` object-tagged splats uniform in the solid ball, dark gray, isotropic
/// with scale `radius·count^(-1/3)`, opacity falling off as a Gaussian of the
/// distance to the center with standard deviation `radius/3`.
pub fn init_sphere(count: usize, center: Vector3<f64>, radius: f64, seed: u64) -> Result<Scene> {
    if count == 0 {
        return Err(Error::invalid("sphere needs at least one splat"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid("sphere radius must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = Vector3::repeat(radius * (count as f64).powf(-1.0 / 3.0));
    let sigma = radius / 3.0;
    let mut splats = Vec::with_capacity(count);
    for _ in 0..count {
        let dir = loop {
            let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            if let Some(d) = v.try_normalize(1e-9) {
                break d;
            }
        };
        let r = radius * rng.random::<f64>().cbrt();
        let opacity = INIT_MAX_OPACITY * (-(r * r) / (2.0 * sigma * sigma)).exp();
        splats.push(GaussianSplat::from_activated(
            center + dir * r,
            [1.0, 0.0, 0.0, 0.0],
            scale,
            opacity,
            Vector3::repeat(INIT_COLOR),
        )?);
    }
    Ok(Scene::from_splats(splats, Tag::Object))
}
