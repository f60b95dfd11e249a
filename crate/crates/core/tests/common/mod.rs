#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod toy;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatedit::render::{render_with, splat_param_mut, RenderSettings, SplatGradient};
use splatedit::scene::{normalize_quat, Camera, GaussianSplat, Intrinsics, Scene, Tag};
use splatedit::Image;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera on the -z side looking at the origin.
pub fn front_camera(width: usize, height: usize) -> Camera {
    let k = Intrinsics {
        fx: 1.1 * width as f64,
        fy: 1.1 * width as f64,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
    };
    Camera::look_at(k, Vector3::new(0.3, -0.2, -4.0), Vector3::zeros(), Vector3::y(), 0.1, 50.0).unwrap()
}

pub fn random_splat(rng: &mut impl Rng) -> GaussianSplat {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() > 0.1 {
            break normalize_quat(q).unwrap();
        }
    };
    let pos = Vector3::from_fn(|_, _| rng.random_range(-0.9..0.9));
    let scale = Vector3::from_fn(|_, _| rng.random_range(0.08..0.45));
    let color = Vector3::from_fn(|_, _| rng.random_range(0.05..0.95));
    GaussianSplat::from_activated(pos, q, scale, rng.random_range(0.1..0.9), color).unwrap()
}

pub fn random_scene(rng: &mut impl Rng, n: usize) -> Scene {
    Scene::from_splats((0..n).map(|_| random_splat(rng)).collect(), Tag::Object)
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize, amp: f64) -> Image {
    Image::from_fn(w, h, c, |_, _, _| rng.random_range(-amp..amp))
}

pub struct Upstream {
    pub color: Image,
    pub depth: Image,
    pub mask: Image,
    pub background: Vector3<f64>,
}

pub fn objective(scene: &Scene, cam: &Camera, up: &Upstream, settings: &RenderSettings) -> f64 {
    let out = render_with(scene, cam, up.background, settings).unwrap();
    out.color.dot(&up.color) + out.depth.dot(&up.depth) + out.mask.dot(&up.mask)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel: f64,
}

/// Central finite differences on every stored parameter, compared with the
/// analytic gradient: relative error below `rel_tol` where |g| > 1e-6, absolute
/// error below `abs_tol` elsewhere.
pub fn check_gradients(
    scene: &Scene,
    cam: &Camera,
    up: &Upstream,
    settings: &RenderSettings,
    analytic: &[SplatGradient],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> FdReport {
    let mut report = FdReport::default();
    for i in 0..scene.len() {
        let a = analytic[i].to_array();
        for k in 0..SplatGradient::LEN {
            let mut plus = scene.clone();
            *splat_param_mut(&mut plus.splats_mut()[i], k) += step;
            let mut minus = scene.clone();
            *splat_param_mut(&mut minus.splats_mut()[i], k) -= step;
            let fd = (objective(&plus, cam, up, settings) - objective(&minus, cam, up, settings)) / (2.0 * step);
            report.checked += 1;
            let ok = if a[k].abs() > 1e-6 {
                let rel = (a[k] - fd).abs() / a[k].abs().max(fd.abs());
                report.max_rel = report.max_rel.max(rel);
                rel < rel_tol
            } else {
                (a[k] - fd).abs() < abs_tol
            };
            if !ok {
                report.failures.push(format!("splat {i} param {k}: analytic {:.9e} fd {:.9e}", a[k], fd));
            }
        }
    }
    report
}
