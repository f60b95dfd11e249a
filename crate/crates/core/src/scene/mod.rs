//! Gaussian splat scenes: data model, persistence and set operations.

mod camera;
mod ply;

pub use camera::{Camera, Intrinsics};
pub use ply::{load_scene, read_scene, save_scene, write_scene};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// Zeroth-order spherical harmonic basis constant. Color = 0.5 + `SH_C0` * f_dc.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Quaternions are renormalized when their norm deviates by more than this.
pub const QUAT_NORM_TOL: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian in its stored (pre-activation) parameterization.
///
/// Scale is stored as a log, opacity as a logit and color as the degree-0 SH
/// coefficient, matching the layout of 3DGS PLY files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSplat {
    pub position: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    pub sh_dc: Vector3<f64>,
}

impl GaussianSplat {
    /// Builds a splat from activated values. `rotation` is normalized; `scale` must be
    /// positive and `opacity` strictly inside `(0, 1)`.
    pub fn from_activated(
        position: Vector3<f64>,
        rotation: [f64; 4],
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
        }
        if !(opacity > 0.0 && opacity < 1.0) {
            return Err(Error::invalid(format!("opacity must lie in (0, 1), got {opacity}")));
        }
        Ok(Self {
            position,
            rotation: normalize_quat(rotation)?,
            log_scale: scale.map(f64::ln),
            opacity_logit: logit(opacity),
            sh_dc: color.map(|c| (c - 0.5) / SH_C0),
        })
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn color(&self) -> Vector3<f64> {
        self.sh_dc.map(|f| 0.5 + SH_C0 * f)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let s = self.scale();
        let m = r * Matrix3::from_diagonal(&s);
        m * m.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh_dc.iter().all(|v| v.is_finite())
    }
}

pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n2: f64 = q.iter().map(|v| v * v).sum();
    if !n2.is_finite() || n2 <= 1e-24 {
        return Err(Error::invalid(format!("quaternion {q:?} cannot be normalized")));
    }
    if (n2.sqrt() - 1.0).abs() <= QUAT_NORM_TOL {
        return Ok(q);
    }
    let n = n2.sqrt();
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Σ = R S Sᵀ Rᵀ for a unit quaternion and per-axis standard deviations.
pub fn build_covariance(rotation: [f64; 4], scale: Vector3<f64>) -> Result<Matrix3<f64>> {
    if rotation.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("covariance inputs must be finite"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
    }
    let r = quat_to_matrix(normalize_quat(rotation)?);
    let m = r * Matrix3::from_diagonal(&scale);
    Ok(m * m.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Background,
    Object,
}

/// Box given by min/max corners in its own frame, rotated by `yaw_deg` about the
/// world y axis through its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub yaw_deg: f64,
}

impl BoundingBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        Self::with_yaw(min, max, 0.0)
    }

    pub fn with_yaw(min: Vector3<f64>, max: Vector3<f64>, yaw_deg: f64) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i])) {
            return Err(Error::invalid(format!(
                "bounding box needs min < max per axis, got {min:?} / {max:?}"
            )));
        }
        Ok(Self { min, max, yaw_deg })
    }

    pub fn from_center_extents(center: Vector3<f64>, extents: Vector3<f64>, yaw_deg: f64) -> Result<Self> {
        Self::with_yaw(center - extents / 2.0, center + extents / 2.0, yaw_deg)
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }

    pub fn extents(&self) -> Vector3<f64> {
        self.max - self.min
    }

    fn yaw(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw_deg.to_radians())
    }

    fn to_box_frame(self, p: &Vector3<f64>) -> Vector3<f64> {
        if self.yaw_deg == 0.0 {
            return *p;
        }
        let c = self.center();
        self.yaw().inverse() * (p - c) + c
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.contains_inflated(p, 0.0)
    }

    pub fn contains_inflated(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let q = self.to_box_frame(p);
        (0..3).all(|i| q[i] >= self.min[i] - margin && q[i] <= self.max[i] + margin)
    }

    /// The eight corners in world coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let c = self.center();
        let rot = self.yaw();
        let mut out = [Vector3::zeros(); 8];
        for (i, slot) in out.iter_mut().enumerate() {
            let p = Vector3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
            *slot = rot * (p - c) + c;
        }
        out
    }
}

/// Ordered splats with one tag each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    splats: Vec<GaussianSplat>,
    tags: Vec<Tag>,
    pub bbox: Option<BoundingBox>,
}

impl Scene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_splats(splats: Vec<GaussianSplat>, tag: Tag) -> Self {
        let tags = vec![tag; splats.len()];
        Self {
            splats,
            tags,
            bbox: None,
        }
    }

    pub fn from_tagged(splats: Vec<GaussianSplat>, tags: Vec<Tag>) -> Result<Self> {
        if splats.len() != tags.len() {
            return Err(Error::invalid("every splat needs exactly one tag"));
        }
        Ok(Self {
            splats,
            tags,
            bbox: None,
        })
    }

    pub fn with_bbox(mut self, bbox: BoundingBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn push(&mut self, splat: GaussianSplat, tag: Tag) {
        self.splats.push(splat);
        self.tags.push(tag);
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn splats(&self) -> &[GaussianSplat] {
        &self.splats
    }

    pub fn splats_mut(&mut self) -> &mut [GaussianSplat] {
        &mut self.splats
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GaussianSplat, Tag)> {
        self.splats.iter().zip(self.tags.iter().copied())
    }

    pub fn retag(&mut self, tag: Tag) {
        self.tags.iter_mut().for_each(|t| *t = tag);
    }

    pub fn count_tagged(&self, tag: Tag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.splats.iter().map(|s| s.position).sum();
        Some(sum / self.len() as f64)
    }

    /// Checks the tag/bbox invariants: object splats must sit inside the bbox
    /// inflated by `margin`.
    pub fn validate(&self, margin: f64) -> Result<()> {
        if self.splats.len() != self.tags.len() {
            return Err(Error::invalid("splat/tag count mismatch"));
        }
        for (i, (s, tag)) in self.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::Validation {
                    index: i,
                    message: "non-finite splat parameter".into(),
                });
            }
            if let (Tag::Object, Some(bbox)) = (tag, &self.bbox) {
                if !bbox.contains_inflated(&s.position, margin) {
                    return Err(Error::Validation {
                        index: i,
                        message: format!("object splat at {:?} lies outside the bounding box", s.position),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Drops every splat whose center lies inside `bbox`, keeping the rest in order.
pub fn excise_bbox(scene: &Scene, bbox: &BoundingBox) -> Scene {
    let (splats, tags) = scene
        .iter()
        .filter(|(s, _)| !bbox.contains(&s.position))
        .map(|(s, t)| (*s, t))
        .unzip();
    Scene {
        splats,
        tags,
        bbox: scene.bbox,
    }
}

/// Concatenates `background` then `object`, keeping each splat's tag.
pub fn merge_scenes(background: &Scene, object: &Scene) -> Scene {
    let mut out = background.clone();
    out.splats.extend_from_slice(&object.splats);
    out.tags.extend_from_slice(&object.tags);
    out.bbox = background.bbox.or(object.bbox);
    out
}
