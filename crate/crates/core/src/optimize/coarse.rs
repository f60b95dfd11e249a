use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    anchor_loss, checkpoint, densify_and_prune, guard, progress, project_splat, Adam, AnchorTarget, GradStats,
    LossRecord, StageConfig, StageOutput,
};
use crate::error::{Error, Result};
use crate::guidance::{sds_grad_3d, DiffusionPrior, RelativePose};
use crate::image::Image;
use crate::render::{render_backward, render_with, SplatGradient};
use crate::scene::{Camera, Scene};

/// Losses and summed parameter gradients of one coarse iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseStep {
    pub record: LossRecord,
    pub grads: Vec<SplatGradient>,
}

/// Anchor-view color and mask losses plus the view-conditioned score
/// distillation term at `sample_cam`, all pulled back to splat parameters.
///
/// The distillation gradient is averaged over pixels and channels like the
/// color loss, so the λ weights are on a common scale.
#[allow(clippy::too_many_arguments)]
pub fn coarse_losses(
    object: &Scene,
    target: &AnchorTarget,
    sample_cam: &Camera,
    prior: &dyn DiffusionPrior,
    cfg: &StageConfig,
    iteration: usize,
    sds_seed: u64,
) -> Result<CoarseStep> {
    if object.is_empty() {
        return Err(Error::invalid("object scene is empty"));
    }
    let n = cfg.iterations;
    let (l_rgb, l_mask, l_sds) = (
        cfg.lambda_rgb.at(iteration, n),
        cfg.lambda_mask.at(iteration, n),
        cfg.lambda_sds.at(iteration, n),
    );
    let settings = cfg.render_settings();
    let bg = cfg.background();
    let cam = &target.camera;
    let out = render_with(object, cam, bg, &settings)?;
    let loss = anchor_loss(&out.color, &out.mask, target, l_rgb, l_mask, cfg.lambda_opacity_entropy);
    let zero_depth = Image::new(cam.width(), cam.height(), 1);
    let mut grads = render_backward(object, cam, &out, &loss.g_color, &zero_depth, &loss.g_mask)?;

    let mut sds_mag = 0.0;
    if l_sds > 0.0 {
        let view = render_with(object, sample_cam, bg, &settings)?;
        let pose = RelativePose::between(sample_cam, cam, &target.center, &target.up)?;
        let sds_cfg = cfg.sds.at_progress(progress(iteration, n)).with_seed(sds_seed);
        let sample = sds_grad_3d(prior, &view.color, &target.foreground_rgb, pose, &sds_cfg)?;
        let count = sample.grad.data().len() as f64;
        sds_mag = sample.grad.data().iter().map(|v| v.abs()).sum::<f64>() / count;
        let g_color = sample.grad.map(|g| l_sds * g / count);
        let zeros = Image::new(sample_cam.width(), sample_cam.height(), 1);
        let extra = render_backward(object, sample_cam, &view, &g_color, &zeros, &zeros)?;
        for (a, b) in grads.iter_mut().zip(&extra) {
            a.add_scaled(b, 1.0);
        }
    }
    Ok(CoarseStep {
        record: LossRecord {
            iteration,
            rgb: loss.rgb,
            mask: loss.mask,
            sds: sds_mag,
            opacity_entropy: loss.entropy,
            lambda_rgb: l_rgb,
            lambda_mask: l_mask,
            lambda_sds: l_sds,
            splats: object.len(),
            anchor_view: sample_cam == cam,
        },
        grads,
    })
}

/// Largest distance of a splat from the scene centroid.
pub(crate) fn object_radius(scene: &Scene) -> f64 {
    let Some(c) = scene.centroid() else { return 0.0 };
    scene.splats().iter().map(|s| (s.position - c).norm()).fold(0.0, f64::max)
}

/// The coarse lifting loop. Each iteration draws a training view, evaluates
/// [`coarse_losses`], takes one Adam step and restores splat invariants;
/// densification and pruning run on their intervals.
pub fn run_coarse(
    object: &Scene,
    target: &AnchorTarget,
    cfg: &StageConfig,
    prior: &dyn DiffusionPrior,
) -> Result<StageOutput> {
    cfg.validate()?;
    target.validate()?;
    let mut scene = object.clone();
    let mut history = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok(StageOutput { scene, history });
    }
    let radius = object_radius(&scene).max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sds.seed);
    let mut adam = Adam::new(scene.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut stats = GradStats::new(scene.len());
    for it in 0..cfg.iterations {
        let (cam, _) = cfg.camera_sampler.sample(&mut rng, target)?;
        let seed = rng.random::<u64>();
        let step = coarse_losses(&scene, target, &cam, prior, cfg, it, seed)?;
        guard("coarse", cfg, it, &step.record, &step.grads, &scene)?;
        stats.add(&step.grads);
        let lr = cfg.lr.per_parameter(progress(it, cfg.iterations), cfg.geometry_lr_factor);
        adam.step(scene.splats_mut(), &step.grads, &lr);
        scene.splats_mut().iter_mut().for_each(project_splat);
        history.push(step.record);

        let (densify, prune) = (cfg.active(cfg.densify_interval, it), cfg.active(cfg.prune_interval, it));
        if densify || prune {
            let (next, origins) = densify_and_prune(&scene, &stats, &cfg.densify, radius, densify, prune);
            if next.is_empty() {
                return Err(Error::Diverged {
                    iteration: it,
                    detail: "pruning removed every splat".into(),
                });
            }
            adam.remap(&origins);
            scene = next;
            stats = GradStats::new(scene.len());
        }
        checkpoint("coarse", cfg, it + 1, &scene, &history)?;
    }
    Ok(StageOutput { scene, history })
}
