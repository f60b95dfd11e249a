//! Pipeline configuration file (TOML). Unknown keys are rejected. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::Vector3;
use serde::Deserialize;
use splatedit::anchor::{AvpParams, AzimuthRing, BrightSide, DEFAULT_ROTATIONS};
use splatedit::guidance::remote::RemoteConfig;
use splatedit::optimize::StageConfig;
use splatedit::scene::{BoundingBox, Intrinsics};

/// Environment variable overriding `[prior]`: `analytic` or a `host:port` endpoint.
pub const PRIOR_ENV: &str = "SPLATEDIT_PRIOR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BboxConfig {
    pub center: [f64; 3],
    pub extents: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub count: usize,
    /// Orbit radius; twice the bbox diagonal when unset.
    pub radius: Option<f64>,
    pub elevation_deg: f64,
    pub width: usize,
    pub height: usize,
    pub fov_y_deg: f64,
    pub up: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            count: 100,
            radius: None,
            elevation_deg: 15.0,
            width: 256,
            height: 256,
            fov_y_deg: 40.0,
            up: [0.0, 1.0, 0.0],
            near: 0.01,
            far: 1000.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvpConfig {
    pub bright_side: BrightSide,
    pub rotations: Vec<f64>,
    /// Score only pixels the scene covers (alpha ≥ 0.5) instead of the whole frame.
    pub foreground_only: bool,
}

impl Default for AvpConfig {
    fn default() -> Self {
        Self {
            bright_side: BrightSide::default(),
            rotations: DEFAULT_ROTATIONS.to_vec(),
            foreground_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PriorConfig {
    /// Closed-form Gaussian stand-in: the coarse stage pulls every view toward
    /// the anchor image, the enhancement stage toward the inpainted frame.
    Analytic {
        #[serde(default)]
        variance: f64,
    },
    Remote(RemoteConfig),
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self::Analytic { variance: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub count: usize,
    /// Sphere radius; half the smallest bbox extent when unset.
    pub radius: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { count: 1000, radius: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LiftConfig {
    pub turntable_frames: usize,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self { turntable_frames: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    /// Remove the original splats inside the box, then add the object.
    #[default]
    Replace,
    /// Keep every original splat.
    Insert,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeConfig {
    pub mode: ComposeMode,
    pub gallery_views: usize,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            mode: ComposeMode::Replace,
            gallery_views: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub views: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { views: 8 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scene: PathBuf,
    prompt: String,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_output")]
    output: PathBuf,
    /// Directory holding the inpainting hand-off; `<output>/anchor` when unset.
    #[serde(default)]
    inpaint_dir: Option<PathBuf>,
    bbox: BboxConfig,
    #[serde(default)]
    ring: RingConfig,
    #[serde(default)]
    avp: AvpConfig,
    #[serde(default)]
    prior: PriorConfig,
    #[serde(default)]
    init: InitConfig,
    #[serde(default)]
    coarse: Option<toml::Table>,
    #[serde(default)]
    enhance: Option<toml::Table>,
    #[serde(default)]
    lift: LiftConfig,
    #[serde(default)]
    compose: ComposeConfig,
    #[serde(default)]
    render: RenderConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub scene: PathBuf,
    pub prompt: String,
    pub seed: u64,
    pub output: PathBuf,
    pub inpaint_dir: PathBuf,
    pub bbox: BoundingBox,
    pub ring: RingConfig,
    pub avp: AvpConfig,
    pub prior: PriorConfig,
    pub init: InitConfig,
    pub coarse: StageConfig,
    pub enhance: StageConfig,
    pub lift: LiftConfig,
    pub compose: ComposeConfig,
    pub render: RenderConfig,
}

/// Overlays `user` onto `base` key by key, descending into nested tables.
fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A stage section only lists the fields that differ from the stage's own defaults.
fn stage(defaults: StageConfig, user: Option<toml::Table>, name: &str) -> anyhow::Result<StageConfig> {
    let Some(user) = user else { return Ok(defaults) };
    let mut base = toml::Table::try_from(&defaults).context("serializing stage defaults")?;
    // A different view mode replaces the sampler's view table wholesale.
    if let Some(views) = user.get("camera_sampler").and_then(|c| c.get("views")) {
        if let Some(sampler) = base.get_mut("camera_sampler").and_then(|c| c.as_table_mut()) {
            sampler.insert("views".into(), views.clone());
        }
    }
    overlay(&mut base, user);
    let cfg: StageConfig = base.try_into().with_context(|| format!("invalid [{name}] section"))?;
    cfg.validate().with_context(|| format!("invalid [{name}] section"))?;
    Ok(cfg)
}

impl PipelineConfig {
    /// Reads a config file; `output` (e.g. from the command line) replaces the
    /// configured output directory before derived paths are resolved.
    pub fn load(path: &Path, output: Option<PathBuf>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, output)
    }

    pub fn parse(text: &str, base: &Path, output: Option<PathBuf>) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::from_str(text).context("parsing config")?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let scene = resolve(raw.scene);
        if !scene.exists() {
            bail!("scene file {} does not exist", scene.display());
        }
        let output = output.unwrap_or_else(|| resolve(raw.output));
        let inpaint_dir = raw.inpaint_dir.map(resolve).unwrap_or_else(|| output.join("anchor"));
        let b = &raw.bbox;
        let bbox = BoundingBox::from_center_extents(Vector3::from(b.center), Vector3::from(b.extents), b.yaw_deg)?;
        if raw.ring.count < 2 {
            bail!("ring.count must be at least 2");
        }
        if raw.avp.rotations.is_empty() {
            bail!("avp.rotations must not be empty");
        }
        let mut coarse = stage(StageConfig::coarse(), raw.coarse, "coarse")?;
        let mut enhance = stage(StageConfig::enhance(), raw.enhance, "enhance")?;
        for (cfg, dir) in [(&mut coarse, "coarse"), (&mut enhance, "enhance")] {
            if let Some(d) = cfg.checkpoint_dir.take() {
                cfg.checkpoint_dir = Some(resolve(d));
            } else if cfg.checkpoint_every.is_some() {
                cfg.checkpoint_dir = Some(output.join("checkpoints").join(dir));
            }
        }
        let cfg = Self {
            scene,
            prompt: raw.prompt,
            seed: raw.seed,
            output,
            inpaint_dir,
            bbox,
            ring: raw.ring,
            avp: raw.avp,
            prior: raw.prior,
            init: raw.init,
            coarse,
            enhance,
            lift: raw.lift,
            compose: raw.compose,
            render: raw.render,
        };
        cfg.ring_for(2)?.validate()?;
        Ok(cfg)
    }

    /// Applies `SPLATEDIT_PRIOR` if set.
    pub fn apply_env(&mut self) -> anyhow::Result<()> {
        let Ok(v) = std::env::var(PRIOR_ENV) else { return Ok(()) };
        let v = v.trim();
        if v.is_empty() {
            return Ok(());
        }
        self.prior = if v == "analytic" {
            match self.prior {
                PriorConfig::Analytic { .. } => self.prior.clone(),
                PriorConfig::Remote(_) => PriorConfig::default(),
            }
        } else {
            let mut remote = match &self.prior {
                PriorConfig::Remote(r) => r.clone(),
                PriorConfig::Analytic { .. } => RemoteConfig::default(),
            };
            remote.endpoint = v.to_string();
            PriorConfig::Remote(remote)
        };
        Ok(())
    }

    pub fn coarse_stage(&self) -> StageConfig {
        self.coarse.clone().with_seed(self.seed)
    }

    pub fn enhance_stage(&self) -> StageConfig {
        self.enhance.clone().with_seed(self.seed.wrapping_add(1))
    }

    pub fn up(&self) -> Vector3<f64> {
        Vector3::from(self.ring.up)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov_y(self.ring.width, self.ring.height, self.ring.fov_y_deg)
    }

    /// The AVP ring with `count` views.
    pub fn ring_for(&self, count: usize) -> anyhow::Result<AzimuthRing> {
        let radius = self.ring.radius.unwrap_or_else(|| 2.0 * self.bbox.extents().norm());
        Ok(AzimuthRing {
            center: self.bbox.center(),
            radius,
            elevation_deg: self.ring.elevation_deg,
            count,
            up: self.up(),
            intrinsics: self.intrinsics(),
            near: self.ring.near,
            far: self.ring.far,
        })
    }

    pub fn avp_params(&self) -> AvpParams {
        AvpParams {
            rotations: self.avp.rotations.clone(),
            bright_side: self.avp.bright_side,
            parallel: true,
        }
    }

    pub fn init_radius(&self) -> f64 {
        self.init.radius.unwrap_or_else(|| 0.5 * self.bbox.extents().min())
    }
}
