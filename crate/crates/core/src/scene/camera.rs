use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn from_fov_y(width: usize, height: usize, fov_y_deg: f64) -> Self {
        let f = height as f64 / 2.0 / (fov_y_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Pinhole camera with a world-to-camera rigid transform `p_cam = R p + t`.
///
/// Camera axes follow the OpenCV convention: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` whose optical axis passes through `target`, with image-up
    /// aligned to `up` as far as possible.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() <= 1e-12 {
            return Err(Error::invalid("camera eye coincides with its target"));
        }
        let forward = forward.normalize();
        let up_perp = up - forward * up.dot(&forward);
        if up.norm() <= 1e-12 || up_perp.norm() <= 1e-9 * up.norm() {
            return Err(Error::invalid("up vector is parallel to the viewing direction"));
        }
        let down = -up_perp.normalize();
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if k.width == 0 || k.height == 0 {
            return Err(Error::invalid("image dimensions must be nonzero"));
        }
        if !(self.near < self.far) || !(self.near > 0.0) {
            return Err(Error::invalid(format!(
                "clip planes must satisfy 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) || !(self.rotation.determinant() > 0.0) {
            return Err(Error::invalid("camera rotation is not orthonormal"));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("camera translation is not finite"));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Camera center in world coordinates.
    pub fn eye(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (no culling).
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy)
    }

    pub fn with_resolution(&self, width: usize, height: usize) -> Camera {
        let k = &self.intrinsics;
        let (sx, sy) = (width as f64 / k.width as f64, height as f64 / k.height as f64);
        Camera {
            intrinsics: Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: k.cx * sx,
                cy: k.cy * sy,
                width,
                height,
            },
            ..*self
        }
    }
}
