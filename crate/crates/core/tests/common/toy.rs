//! A small known object, a background around it, and an analytic prior whose
//! mean is the object's true appearance from the queried relative pose.

use nalgebra::Vector3;
use rand::Rng;
use splatedit::anchor::{orbit_coordinates, orbit_position};
use splatedit::guidance::{AnalyticGaussianPrior, NoiseSchedule};
use splatedit::optimize::AnchorTarget;
use splatedit::render::{render, render_with, RenderSettings};
use splatedit::scene::{BoundingBox, Camera, GaussianSplat, Intrinsics, Scene, Tag};


pub struct Toy {
    pub truth: Scene,
    pub background: Scene,
    pub target: AnchorTarget,
}

pub fn anchor_camera(size: usize) -> Camera {
    let k = Intrinsics::from_fov_y(size, size, 40.0);
    Camera::look_at(k, Vector3::new(0.0, 0.8, -3.2), Vector3::zeros(), Vector3::y(), 0.1, 50.0).unwrap()
}

pub fn object(rng: &mut impl Rng, n: usize) -> Scene {
    let splats = (0..n)
        .map(|_| {
            let dir = loop {
                let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                if v.norm() <= 1.0 {
                    break v;
                }
            };
            let q = [1.0, rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let q = splatedit::scene::normalize_quat(q).unwrap();
            let scale = Vector3::from_fn(|_, _| rng.random_range(0.08..0.2));
            let color = Vector3::new(
                0.3 + 0.6 * (dir.x + 1.0) / 2.0,
                rng.random_range(0.2..0.8),
                0.3 + 0.6 * (dir.y + 1.0) / 2.0,
            );
            GaussianSplat::from_activated(0.5 * dir, q, scale, rng.random_range(0.6..0.95), color).unwrap()
        })
        .collect();
    Scene::from_splats(splats, Tag::Object)
}

/// A floor and back wall of splats outside the object's box.
pub fn background(rng: &mut impl Rng) -> Scene {
    let mut s = Scene::new();
    for i in 0..12 {
        for j in 0..12 {
            let p = Vector3::new(-2.2 + 0.4 * i as f64, -0.9, -1.0 + 0.4 * j as f64);
            let c = Vector3::from_fn(|_, _| rng.random_range(0.2..0.5));
            s.push(GaussianSplat::from_activated(p, [1.0, 0.0, 0.0, 0.0], Vector3::new(0.2, 0.02, 0.2), 0.9, c).unwrap(), Tag::Background);
        }
    }
    let bbox = BoundingBox::new(Vector3::repeat(-0.8), Vector3::repeat(0.8)).unwrap();
    s.with_bbox(bbox)
}

pub fn toy(rng: &mut impl Rng, size: usize) -> Toy {
    let truth = object(rng, 50);
    let camera = anchor_camera(size);
    let out = render(&truth, &camera, Vector3::zeros()).unwrap();
    Toy {
        target: AnchorTarget {
            camera,
            foreground_rgb: out.color,
            foreground_mask: out.mask,
            center: Vector3::zeros(),
            up: Vector3::y(),
        },
        background: background(rng),
        truth,
    }
}

/// The camera at `pose` relative to the anchor.
pub fn camera_at(target: &AnchorTarget, az: f64, el: f64, dr: f64) -> Camera {
    let (az0, el0, r0) = orbit_coordinates(&target.camera.eye(), &target.center, &target.up).unwrap();
    let eye = orbit_position(&target.center, &target.up, az0 + az, el0 + el, r0 + dr).unwrap();
    let c = &target.camera;
    Camera::look_at(c.intrinsics, eye, target.center, target.up, c.near, c.far).unwrap()
}

/// Prior whose mean is the true object rendered from the conditioned pose;
/// unconditioned queries see the anchor view.
pub fn truth_prior(toy: &Toy, variance: f64) -> AnalyticGaussianPrior {
    let truth = toy.truth.clone();
    let target = toy.target.clone();
    AnalyticGaussianPrior::with_mean_fn(NoiseSchedule::default(), 3, variance, move |cond| {
        let cam = match cond.relative_pose {
            Some(p) => camera_at(&target, p.azimuth_deg, p.elevation_deg, p.radius),
            None => target.camera,
        };
        Ok(render_with(&truth, &cam, Vector3::zeros(), &RenderSettings::default().sequential())?.color)
    })
    .unwrap()
}

pub fn anchor_psnr_and_mask(scene: &Scene, target: &AnchorTarget) -> (f64, f64) {
    let out = render(scene, &target.camera, Vector3::zeros()).unwrap();
    let p = splatedit::image::psnr(&out.color, &target.foreground_rgb).unwrap();
    let m = splatedit::image::mean_abs_diff(&out.mask, &target.foreground_mask).unwrap();
    (p, m)
}
