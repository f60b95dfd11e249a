//! Object lifting: sphere initialization, the coarse stage driven by a
//! view-conditioned prior, densification and pruning, and the enhancement stage
//! driven by depth-guided inpainting guidance over the merged scene.

mod adam;
mod coarse;
mod densify;
mod enhance;
mod init;

pub use adam::Adam;
pub use coarse::{coarse_losses, run_coarse, CoarseStep};
pub use densify::{densify_and_prune, DensifyConfig, GradStats, Origin};
pub use enhance::{run_enhance, EnhanceContext};
pub use init::init_sphere;

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::orbit_coordinates;
use crate::anchor::orbit_position;
use crate::error::{Error, Result};
use crate::guidance::SdsConfig;
use crate::image::Image;
use crate::render::{RenderSettings, SplatGradient};
use crate::scene::{normalize_quat, save_scene, Camera, GaussianSplat, Scene, SH_C0};

/// Weight that moves linearly from `start` at the first iteration to `end` at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RampRepr", into = "RampRepr")]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RampRepr {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

impl From<RampRepr> for Ramp {
    fn from(r: RampRepr) -> Self {
        match r {
            RampRepr::Constant(v) => Ramp::constant(v),
            RampRepr::Linear { start, end } => Ramp { start, end },
        }
    }
}

impl From<Ramp> for RampRepr {
    fn from(r: Ramp) -> Self {
        if r.start == r.end {
            RampRepr::Constant(r.start)
        } else {
            RampRepr::Linear {
                start: r.start,
                end: r.end,
            }
        }
    }
}

impl Ramp {
    pub fn constant(v: f64) -> Self {
        Self { start: v, end: v }
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn at(&self, iteration: usize, iterations: usize) -> f64 {
        if iterations <= 1 {
            return self.start;
        }
        let f = (iteration.min(iterations - 1)) as f64 / (iterations - 1) as f64;
        self.start * (1.0 - f) + self.end * f
    }
}

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate at the last iteration; the rate decays exponentially towards it.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 5e-3,
            position_final: 5e-4,
            rotation: 5e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 1e-2,
        }
    }
}

impl LearningRates {
    /// Rates in [`SplatGradient::to_array`] order at a point of the run,
    /// geometry groups scaled by `geometry_factor`.
    pub fn per_parameter(&self, progress: f64, geometry_factor: f64) -> [f64; SplatGradient::LEN] {
        let p = progress.clamp(0.0, 1.0);
        let pos = if self.position > 0.0 && self.position_final > 0.0 {
            (self.position.ln() * (1.0 - p) + self.position_final.ln() * p).exp()
        } else {
            self.position
        } * geometry_factor;
        let (rot, scale) = (self.rotation * geometry_factor, self.scale * geometry_factor);
        [
            pos,
            pos,
            pos,
            self.color,
            self.color,
            self.color,
            self.opacity,
            scale,
            scale,
            scale,
            rot,
            rot,
            rot,
            rot,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ViewMode {
    /// One of `count` evenly spaced azimuths at the anchor's elevation.
    Ring { count: usize },
    /// Uniform azimuth, elevation uniform in the given band (degrees).
    Sphere { elevation_min: f64, elevation_max: f64 },
}

/// How training views are drawn around the target center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSampler {
    /// Probability of training at the anchor view.
    pub p_anchor: f64,
    /// Orbit radius; the anchor's distance to the center when unset.
    pub radius: Option<f64>,
    pub views: ViewMode,
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self {
            p_anchor: 0.25,
            radius: None,
            views: ViewMode::Sphere {
                elevation_min: -10.0,
                elevation_max: 30.0,
            },
        }
    }
}

impl CameraSampler {
    /// Draws a training camera with the anchor's intrinsics. The flag is true
    /// when the anchor itself was drawn.
    pub fn sample(&self, rng: &mut impl Rng, target: &AnchorTarget) -> Result<(Camera, bool)> {
        if rng.random::<f64>() < self.p_anchor {
            return Ok((target.camera, true));
        }
        let (az0, el0, r0) = orbit_coordinates(&target.camera.eye(), &target.center, &target.up)?;
        let radius = self.radius.unwrap_or(r0);
        let (az, el) = match self.views {
            ViewMode::Ring { count } => {
                let k = rng.random_range(0..count.max(1));
                (az0 + k as f64 * 360.0 / count.max(1) as f64, el0)
            }
            ViewMode::Sphere {
                elevation_min,
                elevation_max,
            } => (
                rng.random_range(0.0..360.0),
                if elevation_max > elevation_min {
                    rng.random_range(elevation_min..elevation_max)
                } else {
                    elevation_min
                },
            ),
        };
        let eye = orbit_position(&target.center, &target.up, az, el, radius)?;
        let c = &target.camera;
        Ok((Camera::look_at(c.intrinsics, eye, target.center, target.up, c.near, c.far)?, false))
    }
}

/// Settings of one optimization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub iterations: usize,
    pub lambda_rgb: Ramp,
    pub lambda_mask: Ramp,
    /// Weight of the score-distillation term (3D-aware in the coarse stage,
    /// depth-guided inpainting in enhancement).
    pub lambda_sds: Ramp,
    /// Weight of the mask binarization term `−[m ln m + (1−m) ln(1−m)]`.
    pub lambda_opacity_entropy: f64,
    pub lr: LearningRates,
    /// Multiplies position, rotation and scale rates.
    pub geometry_lr_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// 0 disables densification.
    pub densify_interval: usize,
    /// 0 disables pruning.
    pub prune_interval: usize,
    /// Densification and pruning stop after this fraction of the run.
    pub densify_until: f64,
    pub densify: DensifyConfig,
    pub camera_sampler: CameraSampler,
    pub sds: SdsConfig,
    pub background: [f64; 3],
    pub parallel: bool,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::coarse()
    }
}

impl StageConfig {
    pub fn coarse() -> Self {
        Self {
            iterations: 600,
            lambda_rgb: Ramp::linear(1.0, 10.0),
            lambda_mask: Ramp::constant(1.0),
            lambda_sds: Ramp::constant(1.0),
            lambda_opacity_entropy: 0.0,
            lr: LearningRates::default(),
            geometry_lr_factor: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-15,
            densify_interval: 100,
            prune_interval: 100,
            densify_until: 0.5,
            densify: DensifyConfig::default(),
            camera_sampler: CameraSampler::default(),
            sds: SdsConfig::default(),
            background: [0.0; 3],
            parallel: true,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }

    pub fn enhance() -> Self {
        Self {
            iterations: 400,
            lambda_rgb: Ramp::constant(10.0),
            lambda_sds: Ramp::constant(1.0),
            geometry_lr_factor: 0.1,
            densify_interval: 0,
            prune_interval: 0,
            sds: SdsConfig {
                guidance_scale: 7.5,
                ..SdsConfig::default()
            },
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ramps = [
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_mask", self.lambda_mask),
            ("lambda_sds", self.lambda_sds),
        ];
        for (name, r) in ramps {
            if !(r.start >= 0.0 && r.end >= 0.0) {
                return Err(Error::invalid(format!("{name} must be nonnegative")));
            }
        }
        if !(self.lambda_opacity_entropy >= 0.0) || !(self.geometry_lr_factor >= 0.0) {
            return Err(Error::invalid("weights and factors must be nonnegative"));
        }
        let lr = &self.lr;
        if [lr.position, lr.position_final, lr.rotation, lr.scale, lr.opacity, lr.color]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::invalid("learning rates must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.camera_sampler.p_anchor) {
            return Err(Error::invalid("p_anchor must lie in [0, 1]"));
        }
        if let ViewMode::Ring { count: 0 } = self.camera_sampler.views {
            return Err(Error::invalid("ring sampler needs at least one view"));
        }
        self.sds.validate()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            parallel: self.parallel,
            ..Default::default()
        }
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }

    /// Seeds camera sampling and noise draws.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sds.seed = seed;
        self
    }

    fn active(&self, interval: usize, iteration: usize) -> bool {
        interval > 0
            && iteration > 0
            && iteration.is_multiple_of(interval)
            && (iteration as f64) <= self.densify_until * self.iterations as f64
    }
}

/// Ground truth at the anchor view.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTarget {
    pub camera: Camera,
    /// Foreground of the inpainted anchor image.
    pub foreground_rgb: Image,
    /// Foreground matte in `[0, 1]`; usually binary.
    pub foreground_mask: Image,
    /// Point the training cameras orbit (the edit region's center).
    pub center: Vector3<f64>,
    pub up: Vector3<f64>,
}

impl AnchorTarget {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.camera.width(), self.camera.height());
        if self.foreground_rgb.shape() != (w, h, 3) {
            return Err(Error::invalid("anchor RGB must be 3-channel at the anchor camera's resolution"));
        }
        if self.foreground_mask.shape() != (w, h, 1) {
            return Err(Error::invalid("anchor mask must be 1-channel at the anchor camera's resolution"));
        }
        if self.foreground_mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("anchor mask must lie in [0, 1]"));
        }
        if self.foreground_mask.data().iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("anchor mask is empty".into()));
        }
        if !self.foreground_rgb.is_finite() {
            return Err(Error::invalid("anchor RGB is not finite"));
        }
        Ok(())
    }
}

/// Loss terms and weights recorded at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub rgb: f64,
    pub mask: f64,
    /// Mean absolute value of the image-space score-distillation gradient (0 when skipped).
    pub sds: f64,
    pub opacity_entropy: f64,
    pub lambda_rgb: f64,
    pub lambda_mask: f64,
    pub lambda_sds: f64,
    pub splats: usize,
    pub anchor_view: bool,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str =
        "iteration,rgb,mask,sds,opacity_entropy,lambda_rgb,lambda_mask,lambda_sds,splats,anchor_view";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.rgb,
            self.mask,
            self.sds,
            self.opacity_entropy,
            self.lambda_rgb,
            self.lambda_mask,
            self.lambda_sds,
            self.splats,
            u8::from(self.anchor_view)
        )
    }
}

pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::from(LossRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Result of a stage: the optimized object and its loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub scene: Scene,
    pub history: Vec<LossRecord>,
}

/// Largest stored `sh_dc` magnitude that keeps the color inside `[0, 1]`.
const SH_DC_LIMIT: f64 = 0.5 / SH_C0;

/// Restores splat invariants after a gradient step.
pub(crate) fn project_splat(s: &mut GaussianSplat) {
    s.rotation = normalize_quat(s.rotation).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    for v in s.sh_dc.iter_mut() {
        *v = v.clamp(-SH_DC_LIMIT, SH_DC_LIMIT);
    }
    for v in s.log_scale.iter_mut() {
        *v = v.clamp(-16.0, 6.0);
    }
    s.opacity_logit = s.opacity_logit.clamp(-16.0, 16.0);
}

/// Weighted MSE of the anchor color, full-frame MSE of the mask, the optional
/// opacity-entropy term, and their gradients w.r.t. the rendered color and mask.
pub(crate) struct AnchorLoss {
    pub rgb: f64,
    pub mask: f64,
    pub entropy: f64,
    pub g_color: Image,
    pub g_mask: Image,
}

pub(crate) fn anchor_loss(
    color: &Image,
    mask: &Image,
    target: &AnchorTarget,
    lambda_rgb: f64,
    lambda_mask: f64,
    lambda_entropy: f64,
) -> AnchorLoss {
    let (w, h) = (color.width(), color.height());
    let weights = &target.foreground_mask;
    let wsum: f64 = weights.data().iter().sum::<f64>() * 3.0;
    let n = (w * h) as f64;
    let mut g_color = Image::new(w, h, 3);
    let mut g_mask = Image::new(w, h, 1);
    let (mut rgb, mut msk, mut ent) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let wt = weights.get(x, y, 0);
            for c in 0..3 {
                let d = color.get(x, y, c) - target.foreground_rgb.get(x, y, c);
                rgb += wt * d * d / wsum;
                g_color.set(x, y, c, lambda_rgb * 2.0 * wt * d / wsum);
            }
            let m = mask.get(x, y, 0);
            let d = m - weights.get(x, y, 0);
            msk += d * d / n;
            let mut gm = lambda_mask * 2.0 * d / n;
            if lambda_entropy > 0.0 {
                let mc = m.clamp(1e-6, 1.0 - 1e-6);
                ent -= (mc * mc.ln() + (1.0 - mc) * (1.0 - mc).ln()) / n;
                gm -= lambda_entropy * (mc / (1.0 - mc)).ln() / n;
            }
            g_mask.set(x, y, 0, gm);
        }
    }
    AnchorLoss {
        rgb,
        mask: msk,
        entropy: ent,
        g_color,
        g_mask,
    }
}

/// Progress through a stage in `[0, 1]`.
pub(crate) fn progress(iteration: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        0.0
    } else {
        iteration as f64 / (iterations - 1) as f64
    }
}

pub(crate) fn checkpoint(stage: &str, cfg: &StageConfig, iteration: usize, scene: &Scene, history: &[LossRecord]) -> Result<()> {
    let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) else {
        return Ok(());
    };
    if every == 0 || !iteration.is_multiple_of(every) {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_scene(scene, &dir.join(format!("{stage}_{iteration:05}.ply")))?;
    write_loss_csv(history, &dir.join(format!("{stage}_loss.csv")))
}

/// Aborts with a diagnostic when a loss or gradient is not finite, dumping the
/// current scene into the checkpoint directory if one is configured.
pub(crate) fn guard(
    stage: &str,
    cfg: &StageConfig,
    iteration: usize,
    record: &LossRecord,
    grads: &[SplatGradient],
    scene: &Scene,
) -> Result<()> {
    let finite = [record.rgb, record.mask, record.sds, record.opacity_entropy]
        .iter()
        .all(|v| v.is_finite())
        && grads.iter().all(SplatGradient::is_finite);
    if finite {
        return Ok(());
    }
    let mut detail = format!(
        "{stage} stage: non-finite loss or gradient (rgb {}, mask {}, sds {}) with {} splats",
        record.rgb,
        record.mask,
        record.sds,
        scene.len()
    );
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(format!("{stage}_diverged_{iteration:05}.ply"));
        if std::fs::create_dir_all(dir).is_ok() && save_scene(scene, &path).is_ok() {
            detail.push_str(&format!("; state written to {}", path.display()));
        }
    }
    Err(Error::Diverged { iteration, detail })
}
