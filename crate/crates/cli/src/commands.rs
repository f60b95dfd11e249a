use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::json;
use splatedit::anchor::{
    orbit_coordinates, orbit_position, ratio_plot, sample_ring, score_views, select_anchor, AnchorCandidate,
};
use splatedit::guidance::remote::{RemotePrior, ServerSideControl};
use splatedit::guidance::{
    invert_depth, AnalyticGaussianPrior, ControlProvider, DiffusionPrior, NoiseSchedule, ZeroControl,
};
use splatedit::image::{mean_abs_diff, psnr};
use splatedit::optimize::{
    init_sphere, run_coarse, run_enhance, write_loss_csv, AnchorTarget, EnhanceContext, LossRecord, StageConfig,
};
use splatedit::render::{project_bbox_mask, render_with, RenderOutput, RenderSettings};
use splatedit::scene::{excise_bbox, load_scene, merge_scenes, save_scene, write_scene, Camera, Scene, Tag};
use splatedit::{Error, Image};

use crate::bundle::{self, AnchorRecord, InpaintBundle};
use crate::config::{ComposeMode, PipelineConfig, PriorConfig};

/// Execution settings shared by all commands.
#[derive(Debug, Clone, Copy)]
pub struct Runtime {
    pub parallel: bool,
}

impl Runtime {
    fn settings(&self) -> RenderSettings {
        RenderSettings {
            parallel: self.parallel,
            ..Default::default()
        }
    }

    fn render(&self, scene: &Scene, camera: &Camera) -> splatedit::Result<RenderOutput> {
        render_with(scene, camera, Vector3::zeros(), &self.settings())
    }

    fn stage(&self, mut cfg: StageConfig) -> StageConfig {
        cfg.parallel &= self.parallel;
        cfg
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn scene_bytes(scene: &Scene) -> Vec<u8> {
    let mut buf = Vec::new();
    write_scene(scene, &mut buf).expect("writing to memory");
    buf
}

/// Loads a PLY written by `lift` or `enhance`; every splat becomes an object splat.
fn load_object(path: &Path) -> anyhow::Result<Scene> {
    let mut object = load_scene(path).with_context(|| format!("loading object {}", path.display()))?;
    if object.is_empty() {
        return Err(Error::Degenerate(format!("object {} has no splats", path.display())).into());
    }
    object.retag(Tag::Object);
    Ok(object)
}

fn load_input_scene(cfg: &PipelineConfig) -> anyhow::Result<Scene> {
    let scene = load_scene(&cfg.scene).with_context(|| format!("loading scene {}", cfg.scene.display()))?;
    Ok(scene.with_bbox(cfg.bbox))
}

/// `count` cameras on the orbit through `camera`'s eye, starting at it.
fn orbit_from(camera: &Camera, center: &Vector3<f64>, up: &Vector3<f64>, count: usize) -> anyhow::Result<Vec<Camera>> {
    let (az0, el, r) = orbit_coordinates(&camera.eye(), center, up)?;
    (0..count)
        .map(|k| {
            let eye = orbit_position(center, up, az0 + k as f64 * 360.0 / count as f64, el, r)?;
            Ok(Camera::look_at(camera.intrinsics, eye, *center, *up, camera.near, camera.far)?)
        })
        .collect()
}

fn write_views(dir: &Path, images: &[Image]) -> anyhow::Result<()> {
    create_dir(dir)?;
    for (i, img) in images.iter().enumerate() {
        img.save_png8(&dir.join(format!("view_{i:03}.png")))?;
    }
    Ok(())
}

fn grid(images: &[Image]) -> anyhow::Result<Image> {
    Ok(Image::grid(images, images.len().clamp(1, 4))?)
}

struct Guidance {
    prior: Box<dyn DiffusionPrior>,
    control: Box<dyn ControlProvider>,
}

/// `mean` is the analytic prior's data mean; remote priors ignore it.
fn guidance(cfg: &PipelineConfig, mean: Image, follow_reference: bool) -> anyhow::Result<Guidance> {
    Ok(match &cfg.prior {
        PriorConfig::Analytic { variance } => {
            let schedule = NoiseSchedule::default();
            let prior = if follow_reference {
                AnalyticGaussianPrior::following_reference(schedule, mean, *variance)?
            } else {
                AnalyticGaussianPrior::new(schedule, mean, *variance)?
            };
            Guidance {
                prior: Box::new(prior),
                control: Box::new(ZeroControl),
            }
        }
        PriorConfig::Remote(remote) => {
            log::info!("connecting to prior at {}", remote.endpoint);
            Guidance {
                prior: Box::new(RemotePrior::connect(remote.clone())?),
                control: Box::new(ServerSideControl),
            }
        }
    })
}

fn anchor_metrics(object: &Scene, target: &AnchorTarget, rt: &Runtime) -> anyhow::Result<(f64, f64)> {
    let out = rt.render(object, &target.camera)?;
    Ok((psnr(&out.color, &target.foreground_rgb)?, mean_abs_diff(&out.mask, &target.foreground_mask)?))
}

#[derive(Serialize)]
struct Curves<'a> {
    final_record: Option<&'a LossRecord>,
    history: &'a [LossRecord],
}

fn curves(history: &[LossRecord]) -> Curves<'_> {
    Curves {
        final_record: history.last(),
        history,
    }
}

/// Renders the azimuth ring, scores it, writes the per-view CSV and ratio plot,
/// and exports the anchor view for inpainting.
pub fn avp(cfg: &PipelineConfig, rt: &Runtime) -> anyhow::Result<()> {
    let scene = load_input_scene(cfg)?;
    let ring = cfg.ring_for(cfg.ring.count)?;
    let cameras = sample_ring(&ring)?;
    log::info!("rendering {} ring views of {} splats", cameras.len(), scene.len());
    let mut renders = Vec::with_capacity(cameras.len());
    let mut candidates = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let out = rt.render(&scene, cam)?;
        let mask = cfg.avp.foreground_only.then(|| out.mask.map(|a| if a >= 0.5 { 1.0 } else { 0.0 }));
        candidates.push(AnchorCandidate::from_render(*cam, &out.color, mask));
        renders.push(out);
    }
    let mut params = cfg.avp_params();
    params.parallel = rt.parallel;
    let scores = score_views(&candidates, &params)?;
    let anchor = select_anchor(&scores)?;

    create_dir(&cfg.output)?;
    let mut csv = String::from("view_index,azimuth_deg,ratio,contrast,best_rotation\n");
    for (k, s) in scores.iter().enumerate() {
        let az = ring.azimuth_deg(k);
        match s {
            Some(s) => csv.push_str(&format!("{k},{az},{},{},{}\n", s.ratio, s.contrast, s.best_rotation)),
            None => csv.push_str(&format!("{k},{az},,,\n")),
        }
    }
    let csv_path = cfg.output.join("avp.csv");
    fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
    // Unscored views sit on the neutral line.
    let ratios: Vec<f64> = scores.iter().map(|s| s.map_or(0.5, |s| s.ratio)).collect();
    ratio_plot(&ratios, Some(anchor.view_index), 640, 240).save_png8(&cfg.output.join("ratio_plot.png"))?;

    let k = anchor.view_index;
    let out = &renders[k];
    let covered = out.mask.map(|a| if a >= 0.5 { 1.0 } else { 0.0 });
    let any = covered.data().iter().any(|&v| v > 0.0);
    let depth = invert_depth(&out.normalized_depth(ring.far), any.then_some(&covered))?;
    let record = AnchorRecord {
        anchor_index: k,
        azimuth_deg: ring.azimuth_deg(k),
        ratio: anchor.ratio,
        contrast: anchor.contrast,
        best_rotation: anchor.best_rotation,
        camera: cameras[k],
        center: cfg.bbox.center().into(),
        up: cfg.up().into(),
    };
    let export_dir = cfg.output.join("anchor");
    bundle::export(&export_dir, &record, &out.color, &depth, &project_bbox_mask(&cfg.bbox, &cameras[k]))?;
    println!(
        "anchor view {k} at azimuth {:.1} deg: ratio {:.4}, contrast {:.4}, rotation {} deg",
        record.azimuth_deg, anchor.ratio, anchor.contrast, anchor.best_rotation
    );
    println!("exported anchor view to {}", export_dir.display());
    Ok(())
}

/// Initializes a splat sphere in the edit box and lifts it to the inpainted anchor view.
pub fn lift(cfg: &PipelineConfig, rt: &Runtime) -> anyhow::Result<()> {
    let bundle = InpaintBundle::import(&cfg.inpaint_dir)
        .with_context(|| format!("importing inpainting bundle from {}", cfg.inpaint_dir.display()))?;
    let target = bundle.target()?;
    let init = init_sphere(cfg.init.count, cfg.bbox.center(), cfg.init_radius(), cfg.seed)?;
    let g = guidance(cfg, target.foreground_rgb.clone(), true)?;
    let stage = rt.stage(cfg.coarse_stage());
    log::info!("coarse stage: {} iterations from {} splats", stage.iterations, init.len());
    let result = run_coarse(&init, &target, &stage, g.prior.as_ref())?;

    create_dir(&cfg.output)?;
    save_scene(&result.scene, &cfg.output.join("object.ply"))?;
    write_loss_csv(&result.history, &cfg.output.join("coarse_loss.csv"))?;
    if cfg.lift.turntable_frames > 0 {
        let views = orbit_from(&target.camera, &target.center, &target.up, cfg.lift.turntable_frames)?;
        let frames = views
            .iter()
            .map(|c| Ok(rt.render(&result.scene, c)?.color))
            .collect::<anyhow::Result<Vec<_>>>()?;
        Image::hstack(&frames)?.save_png8(&cfg.output.join("turntable.png"))?;
    }
    let (p, mae) = anchor_metrics(&result.scene, &target, rt)?;
    write_json(
        &cfg.output.join("lift_metrics.json"),
        &json!({
            "anchor_psnr": p,
            "anchor_mask_mae": mae,
            "splats": result.scene.len(),
            "iterations": stage.iterations,
            "losses": curves(&result.history),
        }),
    )?;
    println!("lifted {} splats; anchor PSNR {p:.2} dB, mask MAE {mae:.4}", result.scene.len());
    Ok(())
}

/// The background the object is refined against: the scene with the box
/// emptied in replace mode, else the whole scene.
fn background(cfg: &PipelineConfig, scene: &Scene) -> Scene {
    match cfg.compose.mode {
        ComposeMode::Replace => excise_bbox(scene, &cfg.bbox),
        ComposeMode::Insert => scene.clone(),
    }
}

/// Refines the lifted object's texture in the context of the scene.
pub fn enhance(cfg: &PipelineConfig, rt: &Runtime, object: Option<PathBuf>) -> anyhow::Result<()> {
    let object_path = object.unwrap_or_else(|| cfg.output.join("object.ply"));
    let object = load_object(&object_path)?;
    let bundle = InpaintBundle::import(&cfg.inpaint_dir)
        .with_context(|| format!("importing inpainting bundle from {}", cfg.inpaint_dir.display()))?;
    let target = bundle.target()?;
    let scene = load_input_scene(cfg)?;
    let bg = background(cfg, &scene);
    let bg_before = scene_bytes(&bg);
    let g = guidance(cfg, bundle.inpainted.clone(), false)?;
    let stage = rt.stage(cfg.enhance_stage());
    let ctx = EnhanceContext {
        prompt: cfg.prompt.clone(),
        bbox: Some(cfg.bbox),
    };
    log::info!("enhancement stage: {} iterations on {} splats", stage.iterations, object.len());
    let result = run_enhance(&object, &bg, &target, &stage, &ctx, g.prior.as_ref(), g.control.as_ref())?;
    let background_unchanged = scene_bytes(&bg) == bg_before;

    create_dir(&cfg.output)?;
    save_scene(&result.scene, &cfg.output.join("object_enhanced.ply"))?;
    write_loss_csv(&result.history, &cfg.output.join("enhance_loss.csv"))?;
    let (before, mae_before) = anchor_metrics(&object, &target, rt)?;
    let (after, mae_after) = anchor_metrics(&result.scene, &target, rt)?;
    let composite = |o: &Scene| -> anyhow::Result<Image> { Ok(rt.render(&merge_scenes(&bg, o), &target.camera)?.color) };
    Image::hstack(&[bundle.inpainted.clone(), composite(&object)?, composite(&result.scene)?])?
        .save_png8(&cfg.output.join("comparison.png"))?;
    write_json(
        &cfg.output.join("enhance_metrics.json"),
        &json!({
            "anchor_psnr_before": before,
            "anchor_psnr_after": after,
            "anchor_mask_mae_before": mae_before,
            "anchor_mask_mae_after": mae_after,
            "background_unchanged": background_unchanged,
            "background_splats": bg.len(),
            "iterations": stage.iterations,
            "losses": curves(&result.history),
        }),
    )?;
    if !background_unchanged {
        anyhow::bail!("background changed during enhancement");
    }
    println!("enhanced {} splats; anchor PSNR {before:.2} -> {after:.2} dB", result.scene.len());
    Ok(())
}

/// Inserts the object into the scene and renders a gallery around the edit.
pub fn compose(cfg: &PipelineConfig, rt: &Runtime, object: Option<PathBuf>) -> anyhow::Result<()> {
    let object_path = object.unwrap_or_else(|| {
        let enhanced = cfg.output.join("object_enhanced.ply");
        if enhanced.exists() {
            enhanced
        } else {
            cfg.output.join("object.ply")
        }
    });
    let object = load_object(&object_path)?;
    let scene = load_input_scene(cfg)?;
    let kept = background(cfg, &scene);
    let edited = merge_scenes(&kept, &object);

    create_dir(&cfg.output)?;
    save_scene(&edited, &cfg.output.join("scene_edited.ply"))?;
    let removed = if cfg.compose.mode == ComposeMode::Replace {
        let splats: Vec<_> = scene.splats().iter().filter(|s| cfg.bbox.contains(&s.position)).copied().collect();
        Scene::from_splats(splats, Tag::Background)
    } else {
        Scene::new()
    };
    save_scene(&removed, &cfg.output.join("removed.ply"))?;
    let cameras = sample_ring(&cfg.ring_for(cfg.compose.gallery_views.max(2))?)?;
    let views = cameras
        .iter()
        .take(cfg.compose.gallery_views)
        .map(|c| Ok(rt.render(&edited, c)?.color))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if !views.is_empty() {
        write_views(&cfg.output.join("gallery"), &views)?;
        grid(&views)?.save_png8(&cfg.output.join("gallery.png"))?;
    }
    write_json(
        &cfg.output.join("compose_metrics.json"),
        &json!({
            "mode": format!("{:?}", cfg.compose.mode).to_lowercase(),
            "original_splats": scene.len(),
            "removed_splats": removed.len(),
            "background_splats": kept.len(),
            "object_splats": object.len(),
            "edited_splats": edited.len(),
            "gallery_views": views.len(),
        }),
    )?;
    println!(
        "composed {} background + {} object splats into {}",
        kept.len(),
        object.len(),
        cfg.output.join("scene_edited.ply").display()
    );
    Ok(())
}

/// Renders a scene (the configured one unless overridden) around the edit box.
pub fn render(cfg: &PipelineConfig, rt: &Runtime, scene: Option<PathBuf>) -> anyhow::Result<()> {
    let path = scene.unwrap_or_else(|| cfg.scene.clone());
    let scene = load_scene(&path).with_context(|| format!("loading scene {}", path.display()))?;
    let n = cfg.render.views;
    if n == 0 {
        return Err(Error::InvalidParameter("render.views must be positive".into()).into());
    }
    let cameras = sample_ring(&cfg.ring_for(n.max(2))?)?;
    let views = cameras
        .iter()
        .take(n)
        .map(|c| Ok(rt.render(&scene, c)?.color))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let dir = cfg.output.join("render");
    write_views(&dir, &views)?;
    grid(&views)?.save_png8(&dir.join("grid.png"))?;
    println!("rendered {n} views to {}", dir.display());
    Ok(())
}
