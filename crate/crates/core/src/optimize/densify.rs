use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::render::SplatGradient;
use crate::scene::{logit, Scene};

const SPLIT_MAX_OPACITY: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Mean position-gradient norm above which a splat is split or cloned.
    pub grad_threshold: f64,
    /// Splats whose largest scale is at most this fraction of the object radius
    /// are cloned; larger ones are split.
    pub clone_scale_fraction: f64,
    /// Children of a split get the parent's scales divided by this.
    pub split_factor: f64,
    pub opacity_prune_threshold: f64,
    /// Splats farther than `margin × radius` from the centroid are pruned.
    pub prune_distance_margin: f64,
    /// Densification stops once the scene holds this many splats.
    pub max_splats: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            clone_scale_fraction: 0.05,
            split_factor: 1.6,
            opacity_prune_threshold: 0.005,
            prune_distance_margin: 1.5,
            max_splats: 20_000,
        }
    }
}

/// Accumulated position-gradient norms since the last densification.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStats {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl GradStats {
    pub fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            count: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    /// Records one backward pass; splats with an all-zero gradient were not
    /// visible and are not counted.
    pub fn add(&mut self, grads: &[SplatGradient]) {
        assert_eq!(grads.len(), self.len(), "gradient statistics out of sync with the scene");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_zero() {
                self.sum[i] += g.position.norm();
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }
}

/// Provenance of a splat after [`densify_and_prune`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// The input splat at this index, possibly with adjusted opacity.
    Kept(usize),
    /// Created from the input splat at this index.
    New(usize),
}

/// Splits or clones high-gradient splats, then prunes transparent splats and
/// floaters far from the centroid. `densify` and `prune` select the passes.
///
/// A split replaces the splat by two children offset by ±σ along its largest
/// axis with scales divided by `f = split_factor`; their opacity is scaled by
/// `f²/2` (capped) so the pair covers the parent's projected opacity mass. A clone duplicates the splat and
/// sets both opacities to `1 − √(1 − o)`, so the pair composites to the
/// original opacity where they overlap.
pub fn densify_and_prune(
    scene: &Scene,
    stats: &GradStats,
    cfg: &DensifyConfig,
    radius: f64,
    densify: bool,
    prune: bool,
) -> (Scene, Vec<Origin>) {
    assert_eq!(stats.len(), scene.len(), "gradient statistics out of sync with the scene");
    let mut out = Scene::new();
    out.bbox = scene.bbox;
    let mut origins = Vec::with_capacity(scene.len());
    let mut budget = cfg.max_splats.saturating_sub(scene.len());
    for (i, (s, tag)) in scene.iter().enumerate() {
        let hot = densify && budget > 0 && stats.mean(i) > cfg.grad_threshold;
        if !hot {
            out.push(*s, tag);
            origins.push(Origin::Kept(i));
            continue;
        }
        budget -= 1;
        let scale = s.scale();
        let axis = scale.imax();
        if scale[axis] <= cfg.clone_scale_fraction * radius {
            let mut half = *s;
            half.opacity_logit = logit(1.0 - (1.0 - s.opacity()).sqrt());
            out.push(half, tag);
            origins.push(Origin::Kept(i));
            out.push(half, tag);
            origins.push(Origin::New(i));
        } else {
            let offset = s.rotation_matrix() * (Vector3::ith(axis, 1.0) * scale[axis]);
            let shrink = cfg.split_factor.ln();
            let opacity = (s.opacity() * cfg.split_factor.powi(2) / 2.0).min(SPLIT_MAX_OPACITY);
            for sign in [1.0, -1.0] {
                let mut child = *s;
                child.position += offset * sign;
                child.log_scale.add_scalar_mut(-shrink);
                child.opacity_logit = logit(opacity);
                out.push(child, tag);
                origins.push(Origin::New(i));
            }
        }
    }
    if !prune {
        return (out, origins);
    }
    let Some(centroid) = out.centroid() else {
        return (out, origins);
    };
    let limit = cfg.prune_distance_margin * radius;
    let mut pruned = Scene::new();
    pruned.bbox = out.bbox;
    let mut kept_origins = Vec::with_capacity(origins.len());
    for ((s, tag), o) in out.iter().zip(origins) {
        if s.opacity() >= cfg.opacity_prune_threshold && (s.position - centroid).norm() <= limit {
            pruned.push(*s, tag);
            kept_origins.push(o);
        }
    }
    (pruned, kept_origins)
}
