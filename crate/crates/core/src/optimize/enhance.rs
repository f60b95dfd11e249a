use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::coarse::object_radius;
use super::{
    anchor_loss, checkpoint, densify_and_prune, guard, progress, project_splat, Adam, AnchorTarget, GradStats,
    LossRecord, StageConfig, StageOutput,
};
use crate::error::{Error, Result};
use crate::guidance::{
    di_sds_grad, neutralize_masked, view_conditioned_prompt, ConditionBundle, ControlProvider, DiSdsInputs,
    DiffusionPrior,
};
use crate::image::Image;
use crate::render::{project_bbox_mask, render_backward, render_with};
use crate::scene::{merge_scenes, BoundingBox, Scene};

/// Inputs of the enhancement stage beyond the stage config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnhanceContext {
    pub prompt: String,
    /// Edit region; the background's box when unset, else the object's bounds.
    pub bbox: Option<BoundingBox>,
}

fn edit_region(ctx: &EnhanceContext, object: &Scene, background: &Scene) -> Result<BoundingBox> {
    if let Some(b) = ctx.bbox.or(background.bbox).or(object.bbox) {
        return Ok(b);
    }
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for s in object.splats() {
        let r = Vector3::repeat(3.0 * s.scale().max());
        lo = lo.inf(&(s.position - r));
        hi = hi.sup(&(s.position + r));
    }
    BoundingBox::new(lo, hi)
}

/// The enhancement loop: renders the merged scene at a training view, applies
/// depth-guided inpainting distillation inside the projected edit region,
/// adds the anchor-view losses on the object alone, and updates only the object.
/// The background is read-only.
pub fn run_enhance(
    object: &Scene,
    background: &Scene,
    target: &AnchorTarget,
    cfg: &StageConfig,
    ctx: &EnhanceContext,
    prior: &dyn DiffusionPrior,
    control: &dyn ControlProvider,
) -> Result<StageOutput> {
    cfg.validate()?;
    target.validate()?;
    let mut scene = object.clone();
    let mut history = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 || scene.is_empty() {
        return Ok(StageOutput { scene, history });
    }
    let region = edit_region(ctx, object, background)?;
    let radius = object_radius(&scene).max(1e-6);
    let settings = cfg.render_settings();
    let bg = cfg.background();
    let offset = background.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sds.seed);
    let mut adam = Adam::new(scene.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut stats = GradStats::new(scene.len());
    let n = cfg.iterations;
    for it in 0..n {
        let (cam, _) = cfg.camera_sampler.sample(&mut rng, target)?;
        let seed = rng.random::<u64>();
        let (l_rgb, l_mask, l_sds) = (
            cfg.lambda_rgb.at(it, n),
            cfg.lambda_mask.at(it, n),
            cfg.lambda_sds.at(it, n),
        );

        let anchor = &target.camera;
        let out = render_with(&scene, anchor, bg, &settings)?;
        let loss = anchor_loss(&out.color, &out.mask, target, l_rgb, l_mask, cfg.lambda_opacity_entropy);
        let zero_depth = Image::new(anchor.width(), anchor.height(), 1);
        let mut grads = render_backward(&scene, anchor, &out, &loss.g_color, &zero_depth, &loss.g_mask)?;

        let mut sds_mag = 0.0;
        if l_sds > 0.0 {
            let merged = merge_scenes(background, &scene);
            let view = render_with(&merged, &cam, bg, &settings)?;
            let mask = project_bbox_mask(&region, &cam);
            let far = view
                .depth
                .data()
                .iter()
                .zip(view.mask.data())
                .filter(|(_, m)| **m > 1e-6)
                .map(|(d, m)| d / m)
                .fold(f64::NEG_INFINITY, f64::max);
            let fill = if far.is_finite() { far } else { cam.far };
            let inputs = DiSdsInputs {
                background_image: neutralize_masked(&view.color, &mask)?,
                rendered: view.color.clone(),
                depth_raw: Some(view.normalized_depth(fill)),
                bbox_mask: Some(mask),
            };
            let cond = ConditionBundle::text(view_conditioned_prompt(&ctx.prompt, &cam, anchor, &target.up));
            let sds_cfg = cfg.sds.at_progress(progress(it, n)).with_seed(seed);
            let sample = di_sds_grad(prior, control, &inputs, &cond, &sds_cfg)?;
            let count = sample.grad.data().len() as f64;
            sds_mag = sample.grad.data().iter().map(|v| v.abs()).sum::<f64>() / count;
            let g_color = sample.grad.map(|g| l_sds * g / count);
            let zeros = Image::new(cam.width(), cam.height(), 1);
            let all = render_backward(&merged, &cam, &view, &g_color, &zeros, &zeros)?;
            for (a, b) in grads.iter_mut().zip(&all[offset..]) {
                a.add_scaled(b, 1.0);
            }
        }
        let record = LossRecord {
            iteration: it,
            rgb: loss.rgb,
            mask: loss.mask,
            sds: sds_mag,
            opacity_entropy: loss.entropy,
            lambda_rgb: l_rgb,
            lambda_mask: l_mask,
            lambda_sds: l_sds,
            splats: scene.len(),
            anchor_view: cam == *anchor,
        };
        guard("enhance", cfg, it, &record, &grads, &scene)?;
        stats.add(&grads);
        let lr = cfg.lr.per_parameter(progress(it, n), cfg.geometry_lr_factor);
        adam.step(scene.splats_mut(), &grads, &lr);
        scene.splats_mut().iter_mut().for_each(project_splat);
        history.push(record);

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
        checkpoint("enhance", cfg, it + 1, &scene, &history)?;
    }
    Ok(StageOutput { scene, history })
}
