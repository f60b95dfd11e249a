//! Python bindings: scenes, cameras, images, rendering, anchor view proposal,
//! score distillation with the analytic prior, and the lift and enhancement stages.

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use splatedit::anchor::{propose_anchor as propose, sample_ring, AnchorCandidate, AvpParams, AzimuthRing, BrightSide};
use splatedit::guidance::{self, AnalyticGaussianPrior, ConditionBundle, NoiseSchedule, SdsConfig, ZeroControl};
use splatedit::optimize::{self, AnchorTarget, EnhanceContext, LossRecord, StageConfig};
use splatedit::scene::{self as sc, Intrinsics, Tag};

pyo3::create_exception!(splatedit_py, DegenerateError, PyValueError);
pyo3::create_exception!(splatedit_py, DivergedError, PyRuntimeError);
pyo3::create_exception!(splatedit_py, GuidanceError, PyRuntimeError);

fn to_py(e: splatedit::Error) -> PyErr {
    use splatedit::Error as E;
    let msg = e.to_string();
    match e {
        E::Degenerate(_) => DegenerateError::new_err(msg),
        E::Diverged { .. } => DivergedError::new_err(msg),
        E::GuidanceUnavailable(_) => GuidanceError::new_err(msg),
        E::Io { .. } | E::Image(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for splatedit::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

/// Row-major float image of shape (height, width, channels).
#[pyclass(module = "splatedit_py", from_py_object)]
#[derive(Clone)]
pub struct Image(pub splatedit::Image);

#[pymethods]
impl Image {
    /// Zeros, or `data` in row-major (y, x, c) order.
    #[new]
    #[pyo3(signature = (width, height, channels, data=None))]
    fn new(width: usize, height: usize, channels: usize, data: Option<Vec<f64>>) -> PyResult<Self> {
        Ok(Self(match data {
            Some(d) => splatedit::Image::from_vec(width, height, channels, d).py()?,
            None => splatedit::Image::new(width, height, channels),
        }))
    }

    #[staticmethod]
    #[pyo3(signature = (path, channels=3))]
    fn load_png(path: &str, channels: usize) -> PyResult<Self> {
        Ok(Self(splatedit::Image::load_png(path.as_ref(), channels).py()?))
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        self.0.save_png8(path.as_ref()).py()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    /// `(height, width, channels)`, numpy order.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, c: usize) -> PyResult<f64> {
        let (w, h, ch) = self.0.shape();
        if x >= w || y >= h || c >= ch {
            return Err(PyIndexError::new_err(format!("({x}, {y}, {c}) outside {w}x{h}x{ch}")));
        }
        Ok(self.0.get(x, y, c))
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn psnr(&self, other: &Image) -> PyResult<f64> {
        splatedit::image::psnr(&self.0, &other.0).py()
    }

    fn __repr__(&self) -> String {
        let (w, h, c) = self.0.shape();
        format!("Image(width={w}, height={h}, channels={c})")
    }
}

#[pyclass(module = "splatedit_py", from_py_object)]
#[derive(Clone, Copy)]
pub struct BoundingBox(pub sc::BoundingBox);

#[pymethods]
impl BoundingBox {
    #[new]
    #[pyo3(signature = (center, extents, yaw_deg=0.0))]
    fn new(center: [f64; 3], extents: [f64; 3], yaw_deg: f64) -> PyResult<Self> {
        Ok(Self(sc::BoundingBox::from_center_extents(v3(center), v3(extents), yaw_deg).py()?))
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.0.center().into()
    }

    #[getter]
    fn extents(&self) -> [f64; 3] {
        self.0.extents().into()
    }

    fn contains(&self, point: [f64; 3]) -> bool {
        self.0.contains(&v3(point))
    }
}

#[pyclass(module = "splatedit_py", from_py_object)]
#[derive(Clone, Copy)]
pub struct Camera(pub sc::Camera);

#[pymethods]
impl Camera {
    #[staticmethod]
    #[pyo3(signature = (width, height, fov_y_deg, eye, target, up=[0.0, 1.0, 0.0], near=0.01, far=1000.0))]
    #[allow(clippy::too_many_arguments)]
    fn look_at(
        width: usize,
        height: usize,
        fov_y_deg: f64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        near: f64,
        far: f64,
    ) -> PyResult<Self> {
        let k = Intrinsics::from_fov_y(width, height, fov_y_deg);
        Ok(Self(sc::Camera::look_at(k, v3(eye), v3(target), v3(up), near, far).py()?))
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn eye(&self) -> [f64; 3] {
        self.0.eye().into()
    }
}

/// Ordered Gaussian splats, each tagged background or object.
#[pyclass(module = "splatedit_py", from_py_object)]
#[derive(Clone, Default)]
pub struct Scene(pub sc::Scene);

#[pymethods]
impl Scene {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Loads a 3DGS PLY; every splat is tagged background.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self(sc::load_scene(path.as_ref()).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        sc::save_scene(&self.0, path.as_ref()).py()
    }

    /// Appends a splat given activated values.
    #[pyo3(signature = (position, scale, opacity, color, rotation=[1.0, 0.0, 0.0, 0.0], object=false))]
    fn add(
        &mut self,
        position: [f64; 3],
        scale: [f64; 3],
        opacity: f64,
        color: [f64; 3],
        rotation: [f64; 4],
        object: bool,
    ) -> PyResult<()> {
        let s = sc::GaussianSplat::from_activated(v3(position), rotation, v3(scale), opacity, v3(color)).py()?;
        self.0.push(s, if object { Tag::Object } else { Tag::Background });
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.splats().iter().map(|s| s.position.into()).collect()
    }

    fn colors(&self) -> Vec<[f64; 3]> {
        self.0.splats().iter().map(|s| s.color().into()).collect()
    }

    fn opacities(&self) -> Vec<f64> {
        self.0.splats().iter().map(|s| s.opacity()).collect()
    }

    fn object_count(&self) -> usize {
        self.0.count_tagged(Tag::Object)
    }

    /// Re-tags every splat as object (`True`) or background.
    fn retag(&mut self, object: bool) {
        self.0.retag(if object { Tag::Object } else { Tag::Background });
    }

    /// Copy without the splats whose centers lie in `bbox`.
    fn excise(&self, bbox: &BoundingBox) -> Self {
        Self(sc::excise_bbox(&self.0, &bbox.0))
    }

    /// Background splats followed by object splats.
    #[staticmethod]
    fn merge(background: &Scene, object: &Scene) -> Self {
        Self(sc::merge_scenes(&background.0, &object.0))
    }

    /// Object splats uniform in a ball, dark gray and faint.
    #[staticmethod]
    #[pyo3(signature = (count, center, radius, seed=0))]
    fn init_sphere(count: usize, center: [f64; 3], radius: f64, seed: u64) -> PyResult<Self> {
        Ok(Self(optimize::init_sphere(count, v3(center), radius, seed).py()?))
    }

    fn __repr__(&self) -> String {
        format!("Scene(splats={}, objects={})", self.0.len(), self.0.count_tagged(Tag::Object))
    }
}

#[pyclass(module = "splatedit_py")]
pub struct RenderResult {
    #[pyo3(get)]
    color: Image,
    /// Alpha-weighted depth, not normalized by coverage.
    #[pyo3(get)]
    depth: Image,
    #[pyo3(get)]
    mask: Image,
}

#[pyfunction]
#[pyo3(signature = (scene, camera, background=[0.0, 0.0, 0.0]))]
fn render(py: Python<'_>, scene: &Scene, camera: &Camera, background: [f64; 3]) -> PyResult<RenderResult> {
    let out = py.detach(|| splatedit::render::render(&scene.0, &camera.0, v3(background))).py()?;
    Ok(RenderResult {
        color: Image(out.color),
        depth: Image(out.depth),
        mask: Image(out.mask),
    })
}

/// Renders an azimuth ring around `center` and returns the highest-contrast view.
#[pyfunction]
#[pyo3(signature = (scene, center, radius, count=100, elevation_deg=15.0, width=256, height=256, fov_y_deg=40.0, up=[0.0, 1.0, 0.0], bright_side="right", foreground_only=true))]
#[allow(clippy::too_many_arguments)]
fn propose_anchor<'py>(
    py: Python<'py>,
    scene: &Scene,
    center: [f64; 3],
    radius: f64,
    count: usize,
    elevation_deg: f64,
    width: usize,
    height: usize,
    fov_y_deg: f64,
    up: [f64; 3],
    bright_side: &str,
    foreground_only: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let ring = AzimuthRing {
        center: v3(center),
        radius,
        elevation_deg,
        count,
        up: v3(up),
        intrinsics: Intrinsics::from_fov_y(width, height, fov_y_deg),
        near: 0.01,
        far: 1000.0,
    };
    let params = AvpParams {
        bright_side: bright_side.parse::<BrightSide>().py()?,
        ..Default::default()
    };
    let (score, camera) = py
        .detach(|| -> splatedit::Result<_> {
            let cams = sample_ring(&ring)?;
            let mut views = Vec::with_capacity(cams.len());
            for cam in &cams {
                let out = splatedit::render::render(&scene.0, cam, Vector3::zeros())?;
                let mask = foreground_only.then(|| out.mask.map(|a| if a >= 0.5 { 1.0 } else { 0.0 }));
                views.push(AnchorCandidate::from_render(*cam, &out.color, mask));
            }
            let s = propose(&views, &params)?;
            Ok((s, cams[s.view_index]))
        })
        .py()?;
    let d = PyDict::new(py);
    d.set_item("view_index", score.view_index)?;
    d.set_item("azimuth_deg", ring.azimuth_deg(score.view_index))?;
    d.set_item("best_rotation", score.best_rotation)?;
    d.set_item("ratio", score.ratio)?;
    d.set_item("contrast", score.contrast)?;
    d.set_item("camera", Camera(camera))?;
    Ok(d)
}

/// `eps_cond + s·(eps_cond − eps_uncond)`.
#[pyfunction]
fn cfg_combine(eps_cond: &Image, eps_uncond: &Image, scale: f64) -> PyResult<Image> {
    Ok(Image(guidance::cfg_combine(&eps_cond.0, &eps_uncond.0, scale).py()?))
}

/// Depth rescaled to `[0, 1]` over the mask with near bright.
#[pyfunction]
#[pyo3(signature = (depth, mask=None))]
fn invert_depth(depth: &Image, mask: Option<&Image>) -> PyResult<Image> {
    Ok(Image(guidance::invert_depth(&depth.0, mask.map(|m| &m.0)).py()?))
}

/// Closed-form Gaussian diffusion prior centered on a fixed image.
#[pyclass(module = "splatedit_py")]
pub struct AnalyticPrior(AnalyticGaussianPrior);

fn sds_config(guidance_scale: f64, seed: u64, t_min: f64, t_max: f64) -> SdsConfig {
    SdsConfig {
        t_min,
        t_max,
        t_max_end: None,
        guidance_scale,
        seed,
        ..Default::default()
    }
}

#[pymethods]
impl AnalyticPrior {
    #[new]
    #[pyo3(signature = (mean, variance=0.0))]
    fn new(mean: &Image, variance: f64) -> PyResult<Self> {
        Ok(Self(AnalyticGaussianPrior::new(NoiseSchedule::default(), mean.0.clone(), variance).py()?))
    }

    /// One score-distillation sample: `(gradient, timestep)`.
    #[pyo3(signature = (rendered, prompt="", guidance_scale=7.5, seed=0, t_min=0.02, t_max=0.98))]
    fn sds_grad(
        &self,
        rendered: &Image,
        prompt: &str,
        guidance_scale: f64,
        seed: u64,
        t_min: f64,
        t_max: f64,
    ) -> PyResult<(Image, usize)> {
        let cfg = sds_config(guidance_scale, seed, t_min, t_max);
        let s = guidance::sds_grad(&self.0, &rendered.0, &ConditionBundle::text(prompt), &cfg).py()?;
        Ok((Image(s.grad), s.t))
    }

    /// Exact mean and variance of the sampled gradient over timesteps and noise.
    #[pyo3(signature = (rendered, guidance_scale=7.5, t_min=0.02, t_max=0.98))]
    fn sds_moments(&self, rendered: &Image, guidance_scale: f64, t_min: f64, t_max: f64) -> PyResult<(Image, Image)> {
        let (m, v) = self.0.sds_moments(&rendered.0, &sds_config(guidance_scale, 0, t_min, t_max)).py()?;
        Ok((Image(m), Image(v)))
    }
}

fn history<'py>(py: Python<'py>, records: &[LossRecord]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("rgb", r.rgb)?;
            d.set_item("mask", r.mask)?;
            d.set_item("sds", r.sds)?;
            d.set_item("opacity_entropy", r.opacity_entropy)?;
            d.set_item("splats", r.splats)?;
            d.set_item("anchor_view", r.anchor_view)?;
            Ok(d)
        })
        .collect()
}

fn anchor_target(
    camera: &Camera,
    image: &Image,
    mask: &Image,
    center: [f64; 3],
    up: [f64; 3],
) -> PyResult<AnchorTarget> {
    Ok(AnchorTarget {
        camera: camera.0,
        foreground_rgb: image.0.mul_mask(&mask.0).py()?,
        foreground_mask: mask.0.clone(),
        center: v3(center),
        up: v3(up),
    })
}

/// Coarse stage against the masked anchor image with the analytic prior
/// (every view pulled toward the anchor foreground). Returns `(object, history)`.
#[pyfunction]
#[pyo3(signature = (object, camera, image, mask, center, up=[0.0, 1.0, 0.0], iterations=600, seed=0, variance=0.0, lambda_sds=1.0))]
#[allow(clippy::too_many_arguments)]
fn lift<'py>(
    py: Python<'py>,
    object: &Scene,
    camera: &Camera,
    image: &Image,
    mask: &Image,
    center: [f64; 3],
    up: [f64; 3],
    iterations: usize,
    seed: u64,
    variance: f64,
    lambda_sds: f64,
) -> PyResult<(Scene, Vec<Bound<'py, PyDict>>)> {
    let target = anchor_target(camera, image, mask, center, up)?;
    let mut cfg = StageConfig::coarse().with_seed(seed);
    cfg.iterations = iterations;
    cfg.lambda_sds = optimize::Ramp::constant(lambda_sds);
    let prior =
        AnalyticGaussianPrior::following_reference(NoiseSchedule::default(), target.foreground_rgb.clone(), variance)
            .py()?;
    let out = py.detach(|| optimize::run_coarse(&object.0, &target, &cfg, &prior)).py()?;
    Ok((Scene(out.scene), history(py, &out.history)?))
}

/// Enhancement stage with the analytic prior centered on the full inpainted
/// frame. The background is never modified. Returns `(object, history)`.
#[pyfunction]
#[pyo3(signature = (object, background, camera, inpainted, mask, center, up=[0.0, 1.0, 0.0], prompt="", bbox=None, iterations=400, seed=1, variance=0.0))]
#[allow(clippy::too_many_arguments)]
fn enhance<'py>(
    py: Python<'py>,
    object: &Scene,
    background: &Scene,
    camera: &Camera,
    inpainted: &Image,
    mask: &Image,
    center: [f64; 3],
    up: [f64; 3],
    prompt: &str,
    bbox: Option<BoundingBox>,
    iterations: usize,
    seed: u64,
    variance: f64,
) -> PyResult<(Scene, Vec<Bound<'py, PyDict>>)> {
    let target = anchor_target(camera, inpainted, mask, center, up)?;
    let mut cfg = StageConfig::enhance().with_seed(seed);
    cfg.iterations = iterations;
    let prior = AnalyticGaussianPrior::new(NoiseSchedule::default(), inpainted.0.clone(), variance).py()?;
    let ctx = EnhanceContext {
        prompt: prompt.to_string(),
        bbox: bbox.map(|b| b.0),
    };
    let out = py
        .detach(|| optimize::run_enhance(&object.0, &background.0, &target, &cfg, &ctx, &prior, &ZeroControl))
        .py()?;
    Ok((Scene(out.scene), history(py, &out.history)?))
}

#[pymodule]
fn splatedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class, function and exception to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<BoundingBox>()?;
    m.add_class::<Camera>()?;
    m.add_class::<Scene>()?;
    m.add_class::<RenderResult>()?;
    m.add_class::<AnalyticPrior>()?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(propose_anchor, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine, m)?)?;
    m.add_function(wrap_pyfunction!(invert_depth, m)?)?;
    m.add_function(wrap_pyfunction!(lift, m)?)?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    let py = m.py();
    m.add("DegenerateError", py.get_type::<DegenerateError>())?;
    m.add("DivergedError", py.get_type::<DivergedError>())?;
    m.add("GuidanceError", py.get_type::<GuidanceError>())?;
    Ok(())
}
