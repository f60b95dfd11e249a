//! EWA projection of 3D Gaussians to screen-space 2D Gaussians, and the
//! chain rule from screen-space gradients back to stored splat parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{RenderSettings, SplatGradient};
use crate::scene::{quat_to_matrix, Camera, GaussianSplat, SH_C0};

/// Mahalanobis radius of the 99% probability ellipse of a 2D Gaussian.
pub const ELLIPSE_99_SIGMA: f64 = 3.034_854_258_770_293;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    /// Index into the scene's splat list.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z of the center.
    pub depth: f64,
    pub color: Vector3<f64>,
    pub opacity: f64,
    /// Half-width in pixels of the square outside which the splat's alpha drops
    /// below the renderer's cutoff.
    pub extent: f64,
}

pub(crate) struct Geometry {
    t: Vector3<f64>,
    jw: Matrix2x3<f64>,
    rs: Matrix3<f64>,
    r: Matrix3<f64>,
    qn: [f64; 4],
    qnorm: f64,
    scale: Vector3<f64>,
}

fn jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let k = &camera.intrinsics;
    let iz = 1.0 / t.z;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * t.x * iz * iz, 0.0, k.fy * iz, -k.fy * t.y * iz * iz)
}

fn geometry(splat: &GaussianSplat, camera: &Camera) -> Geometry {
    let t = camera.world_to_camera(&splat.position);
    let q = splat.rotation;
    let qnorm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let qn = q.map(|v| v / qnorm);
    let r = quat_to_matrix(qn);
    let scale = splat.scale();
    Geometry {
        t,
        jw: jacobian(camera, &t) * camera.rotation,
        rs: r * Matrix3::from_diagonal(&scale),
        r,
        qn,
        qnorm,
        scale,
    }
}

fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mid = 0.5 * (a + c);
    mid + (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

pub(crate) fn project_with(
    splat: &GaussianSplat,
    index: usize,
    camera: &Camera,
    settings: &RenderSettings,
) -> Option<ProjectedSplat> {
    let g = geometry(splat, camera);
    if !(g.t.z > camera.near) {
        return None;
    }
    let cov3 = g.rs * g.rs.transpose();
    let cov2d = g.jw * cov3 * g.jw.transpose() + Matrix2::identity() * settings.low_pass;
    let det = cov2d.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let (u, v) = camera.project_camera_point(&g.t);
    let sigma_max = max_eigenvalue(&cov2d).sqrt();

    let (w, h) = (camera.width() as f64, camera.height() as f64);
    let r99 = ELLIPSE_99_SIGMA * sigma_max;
    if u + r99 < 0.0 || u - r99 > w || v + r99 < 0.0 || v - r99 > h {
        return None;
    }

    let opacity = splat.opacity();
    let extent = if opacity > settings.min_alpha {
        (2.0 * (opacity / settings.min_alpha).ln()).sqrt() * sigma_max
    } else {
        0.0
    };
    Some(ProjectedSplat {
        index,
        mean2d: Vector2::new(u, v),
        cov2d,
        conic,
        depth: g.t.z,
        color: splat.color(),
        opacity,
        extent,
    })
}

/// Projects one splat with the default render settings. `None` means culled.
pub fn project(splat: &GaussianSplat, camera: &Camera) -> Option<ProjectedSplat> {
    project_with(splat, 0, camera, &RenderSettings::default())
}

/// Screen-space gradient of one projected splat, accumulated over pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ScreenGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. the conic treated as a full 2x2 matrix.
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
    }
}

/// Partial derivatives of the rotation matrix w.r.t. the unit quaternion components.
fn rotation_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Chains a screen-space gradient back to the splat's stored parameters.
pub(crate) fn backprop_splat(
    splat: &GaussianSplat,
    proj: &ProjectedSplat,
    camera: &Camera,
    grad: &ScreenGrad,
) -> SplatGradient {
    let g = geometry(splat, camera);
    let k = &camera.intrinsics;
    let (tx, ty, tz) = (g.t.x, g.t.y, g.t.z);
    let iz = 1.0 / tz;
    let iz2 = iz * iz;

    // conic = cov2d⁻¹  =>  dcov = -A dA A
    let a = proj.conic;
    let g_cov2d = -(a * grad.conic * a);

    let cov3 = g.rs * g.rs.transpose();
    let g_jw = 2.0 * g_cov2d * g.jw * cov3;
    let g_cov3 = g.jw.transpose() * g_cov2d * g.jw;
    let g_j = g_jw * camera.rotation.transpose();

    let mut g_t = Vector3::new(
        grad.mean2d.x * k.fx * iz,
        grad.mean2d.y * k.fy * iz,
        -(grad.mean2d.x * k.fx * tx + grad.mean2d.y * k.fy * ty) * iz2,
    );
    g_t.x += g_j[(0, 2)] * (-k.fx * iz2);
    g_t.y += g_j[(1, 2)] * (-k.fy * iz2);
    g_t.z += g_j[(0, 0)] * (-k.fx * iz2)
        + g_j[(0, 2)] * (2.0 * k.fx * tx * iz2 * iz)
        + g_j[(1, 1)] * (-k.fy * iz2)
        + g_j[(1, 2)] * (2.0 * k.fy * ty * iz2 * iz);
    g_t.z += grad.depth;
    let position = camera.rotation.transpose() * g_t;

    // cov3 = M Mᵀ with M = R S
    let g_m = 2.0 * g_cov3 * g.rs;
    let g_r = g_m * Matrix3::from_diagonal(&g.scale);
    let g_scale = Vector3::from_fn(|c, _| (0..3).map(|i| g.r[(i, c)] * g_m[(i, c)]).sum::<f64>());
    let log_scale = g_scale.component_mul(&g.scale);

    let partials = rotation_partials(g.qn);
    let g_qn: [f64; 4] = std::array::from_fn(|j| g_r.component_mul(&partials[j]).sum());
    let dot: f64 = g_qn.iter().zip(&g.qn).map(|(a, b)| a * b).sum();
    let rotation = std::array::from_fn(|j| (g_qn[j] - g.qn[j] * dot) / g.qnorm);

    let o = proj.opacity;
    SplatGradient {
        position,
        rotation,
        log_scale,
        opacity_logit: grad.opacity * o * (1.0 - o),
        sh_dc: grad.color * SH_C0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use approx::assert_relative_eq;

    fn axis_camera(f: f64) -> Camera {
        let k = Intrinsics {
            fx: f,
            fy: f,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        };
        Camera::look_at(k, Vector3::new(0.0, 0.0, -5.0), Vector3::zeros(), Vector3::y(), 0.1, 100.0).unwrap()
    }

    fn iso(pos: Vector3<f64>, s: f64) -> GaussianSplat {
        GaussianSplat::from_activated(pos, [1.0, 0.0, 0.0, 0.0], Vector3::repeat(s), 0.8, Vector3::repeat(0.5))
            .unwrap()
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let cam = axis_camera(100.0);
        let p = project(&iso(Vector3::zeros(), 0.1), &cam).unwrap();
        assert_relative_eq!(p.mean2d, Vector2::new(32.0, 24.0), epsilon = 1e-12);
        assert_relative_eq!(p.depth, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(100.0);
        assert!(project(&iso(Vector3::new(0.0, 0.0, -10.0), 0.1), &cam).is_none());
    }

    #[test]
    fn far_off_screen_is_culled() {
        let cam = axis_camera(100.0);
        assert!(project(&iso(Vector3::new(40.0, 0.0, 0.0), 0.01), &cam).is_none());
    }

    #[test]
    fn isotropic_cov2d_matches_sampled_projection() {
        // Oracle: push points sampled on the ±1σ axes through the pinhole model and
        // measure the screen-space spread by central differences.
        let cam = axis_camera(100.0);
        let s = 0.05;
        let splat = iso(Vector3::zeros(), s);
        let p = project(&splat, &cam).unwrap();
        let h = 1e-4;
        let proj = |d: Vector3<f64>| {
            let (u, v) = cam.project_camera_point(&cam.world_to_camera(&(splat.position + d)));
            Vector2::new(u, v)
        };
        let mut cov = Matrix2::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = h;
            let col = (proj(e) - proj(-e)) / (2.0 * h) * s;
            cov += col * col.transpose();
        }
        let expected = (100.0 * s / 5.0f64).powi(2);
        assert_relative_eq!(cov, Matrix2::identity() * expected, epsilon = 1e-6);
        assert_relative_eq!(p.cov2d - Matrix2::identity() * 0.3, cov, epsilon = 1e-6);
    }
}
