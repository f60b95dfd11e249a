//! Anchor view proposal.
//!
//! Cameras are placed on an azimuth ring around the edit region. Each rendering is
//! reduced to its HSV value channel, rotated by a fixed set of angles, and scored by
//! how unevenly brightness splits between the left and right halves. The view with
//! the strongest split wins.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{Camera, Intrinsics};

/// Default rotation set: 45° steps covering left-right, top-bottom and both diagonals.
pub const DEFAULT_ROTATIONS: [f64; 8] = [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0];

/// Cameras evenly spaced in azimuth around `center`, all looking at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AzimuthRing {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub elevation_deg: f64,
    pub count: usize,
    pub up: Vector3<f64>,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
}

/// Orthonormal frame `(e1, e2, up)` in which azimuth 0 points along `e1`.
pub fn ring_frame(up: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>, Vector3<f64>)> {
    if up.norm() <= 1e-12 {
        return Err(Error::invalid("up vector must be nonzero"));
    }
    let up = up.normalize();
    let seed = if up.x.abs() < 0.9 { Vector3::x() } else { Vector3::z() };
    let e1 = (seed - up * seed.dot(&up)).normalize();
    let e2 = up.cross(&e1);
    Ok((e1, e2, up))
}

/// Position on a sphere around `center` in the ring frame of `up`.
pub fn orbit_position(
    center: &Vector3<f64>,
    up: &Vector3<f64>,
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
) -> Result<Vector3<f64>> {
    let (e1, e2, up) = ring_frame(up)?;
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Ok(center + radius * (el.cos() * (az.cos() * e1 + az.sin() * e2) + el.sin() * up))
}

/// Azimuth (degrees in `[0, 360)`), elevation (degrees) and distance of `point`
/// around `center` in the ring frame of `up`.
pub fn orbit_coordinates(point: &Vector3<f64>, center: &Vector3<f64>, up: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let (e1, e2, up) = ring_frame(up)?;
    let d = point - center;
    let r = d.norm();
    if r <= 1e-12 {
        return Ok((0.0, 0.0, 0.0));
    }
    let az = d.dot(&e2).atan2(d.dot(&e1)).to_degrees().rem_euclid(360.0);
    let el = (d.dot(&up) / r).clamp(-1.0, 1.0).asin().to_degrees();
    Ok((az, el, r))
}

impl AzimuthRing {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::invalid("ring needs at least two views"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid("ring radius must be positive"));
        }
        Ok(())
    }

    pub fn azimuth_step(&self) -> f64 {
        360.0 / self.count as f64
    }

    pub fn azimuth_deg(&self, k: usize) -> f64 {
        k as f64 * self.azimuth_step()
    }

    pub fn camera(&self, k: usize) -> Result<Camera> {
        let eye = orbit_position(&self.center, &self.up, self.azimuth_deg(k), self.elevation_deg, self.radius)?;
        Camera::look_at(self.intrinsics, eye, self.center, self.up, self.near, self.far)
    }
}

/// One camera per ring slot, view `k` at azimuth `k·360/count`.
pub fn sample_ring(ring: &AzimuthRing) -> Result<Vec<Camera>> {
    ring.validate()?;
    (0..ring.count).map(|k| ring.camera(k)).collect()
}

/// Per-pixel HSV value `V = max(R, G, B)`.
pub fn value_channel(image: &Image) -> Image {
    let (w, h, c) = image.shape();
    Image::from_fn(w, h, 1, |x, y, _| {
        image.pixel(x, y)[..c].iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0)
    })
}

/// `(sin, cos)` of an angle in degrees, reduced by quadrant so that angles 180°
/// apart give exactly negated values.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let d = deg.rem_euclid(360.0);
    let q = ((d / 90.0).floor() as i64).rem_euclid(4);
    let (s, c) = (d - 90.0 * q as f64).to_radians().sin_cos();
    match q {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

/// Pixel index of offset `e` from the image center along an axis of `n` pixels.
/// Rounding mirrors exactly under `e -> -e`; `negative_tie` orders `e == 0`.
fn mirrored_index(center: f64, e: f64, negative_tie: bool, n: usize) -> Option<usize> {
    let neg = e < 0.0 || (e == 0.0 && negative_tie);
    let k = (center + e.abs()).floor();
    if k >= n as f64 {
        return None;
    }
    let k = k as usize;
    Some(if neg { n - 1 - k } else { k })
}

/// Mean V over the left and right halves after rotating the frame by
/// `rotation_deg` about its center (nearest neighbour; out-of-frame pixels
/// and masked-out pixels excluded). Columns straddling the center are excluded.
///
/// Returns `None` if either half ends up empty.
fn half_means(v: &Image, rotation_deg: f64, mask: Option<&Image>) -> Option<(f64, f64)> {
    let (w, h) = (v.width(), v.height());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = sin_cos_deg(rotation_deg);
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let half = if px < cx {
                0
            } else if px > cx {
                1
            } else {
                continue;
            };
            // Output pixel p samples source c + R(-θ)(p - c).
            let (dx, dy) = (px - cx, y as f64 + 0.5 - cy);
            let (ex, ey) = (c * dx + s * dy, -s * dx + c * dy);
            let Some(ix) = mirrored_index(cx, ex, ey < 0.0, w) else { continue };
            let Some(iy) = mirrored_index(cy, ey, ex < 0.0, h) else { continue };
            if let Some(m) = mask {
                if m.get(ix, iy, 0) < 0.5 {
                    continue;
                }
            }
            sums[half] += v.get(ix, iy, 0);
            counts[half] += 1;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return None;
    }
    Some((sums[0] / counts[0] as f64, sums[1] / counts[1] as f64))
}

/// Left-half share of brightness after rotating by `rotation_deg`:
/// `mean(left) / (mean(left) + mean(right))`, 0.5 when both are zero.
pub fn brightness_ratio(v: &Image, rotation_deg: f64, fg_mask: Option<&Image>) -> Result<f64> {
    if v.channels() != 1 {
        return Err(Error::invalid("brightness ratio expects a value-channel image"));
    }
    if let Some(m) = fg_mask {
        if m.shape() != v.shape() {
            return Err(Error::invalid("foreground mask must match the value image"));
        }
    }
    let (left, right) = half_means(v, rotation_deg, fg_mask)
        .ok_or_else(|| Error::Degenerate(format!("mask is empty on one half after rotating by {rotation_deg}°")))?;
    let total = left + right;
    Ok(if total == 0.0 { 0.5 } else { left / total })
}

/// Which half of the rotated anchor view should hold the bright side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrightSide {
    Left,
    /// Report the rotation with the smallest ratio (left side darkest).
    #[default]
    Right,
}

impl FromStr for BrightSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(BrightSide::Left),
            "right" => Ok(BrightSide::Right),
            other => Err(Error::invalid(format!("bright side must be 'left' or 'right', got '{other}'"))),
        }
    }
}

impl fmt::Display for BrightSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BrightSide::Left => "left",
            BrightSide::Right => "right",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvpParams {
    pub rotations: Vec<f64>,
    pub bright_side: BrightSide,
    pub parallel: bool,
}

impl Default for AvpParams {
    fn default() -> Self {
        Self {
            rotations: DEFAULT_ROTATIONS.to_vec(),
            bright_side: BrightSide::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_index: usize,
    /// Rotation (degrees) that puts the bright side where [`BrightSide`] asks.
    pub best_rotation: f64,
    /// Ratio at `best_rotation`.
    pub ratio: f64,
    /// `max |ratio − 0.5|` over the rotation set.
    pub contrast: f64,
}

/// A rendered view prepared for scoring.
#[derive(Debug, Clone)]
pub struct AnchorCandidate {
    pub camera: Camera,
    /// Value channel of the render.
    pub value: Image,
    pub mask: Option<Image>,
}

impl AnchorCandidate {
    pub fn from_render(camera: Camera, color: &Image, mask: Option<Image>) -> Self {
        Self {
            camera,
            value: value_channel(color),
            mask,
        }
    }
}

/// Scores one view; `None` if every rotation leaves a half empty.
pub fn score_view(index: usize, cand: &AnchorCandidate, params: &AvpParams) -> Result<Option<ViewScore>> {
    let mut best: Option<ViewScore> = None;
    let mut contrast: f64 = 0.0;
    let mut any = false;
    for &rot in &params.rotations {
        let ratio = match brightness_ratio(&cand.value, rot, cand.mask.as_ref()) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        };
        any = true;
        contrast = contrast.max((ratio - 0.5).abs());
        let better = match (&best, params.bright_side) {
            (None, _) => true,
            (Some(b), BrightSide::Right) => ratio < b.ratio,
            (Some(b), BrightSide::Left) => ratio > b.ratio,
        };
        if better {
            best = Some(ViewScore {
                view_index: index,
                best_rotation: rot,
                ratio,
                contrast: 0.0,
            });
        }
    }
    Ok(any.then(|| ViewScore {
        contrast,
        ..best.expect("set whenever a rotation scored")
    }))
}

/// Scores every view; entries are `None` for fully masked views.
pub fn score_views(views: &[AnchorCandidate], params: &AvpParams) -> Result<Vec<Option<ViewScore>>> {
    if params.rotations.is_empty() {
        return Err(Error::invalid("rotation set is empty"));
    }
    if params.parallel {
        views.par_iter().enumerate().map(|(i, v)| score_view(i, v, params)).collect()
    } else {
        views.iter().enumerate().map(|(i, v)| score_view(i, v, params)).collect()
    }
}

/// Picks the highest-contrast view among already computed scores; ties go to
/// the lowest index.
pub fn select_anchor(scores: &[Option<ViewScore>]) -> Result<ViewScore> {
    let mut best: Option<ViewScore> = None;
    for s in scores.iter().flatten() {
        let replace = match &best {
            None => true,
            Some(b) => s.contrast > b.contrast,
        };
        if replace {
            best = Some(*s);
        }
    }
    best.ok_or_else(|| Error::Degenerate("every view is fully masked".into()))
}

pub fn propose_anchor(views: &[AnchorCandidate], params: &AvpParams) -> Result<ViewScore> {
    if views.len() < 2 {
        return Err(Error::invalid("anchor proposal needs at least two views"));
    }
    select_anchor(&score_views(views, params)?)
}

/// Line plot of ratio against view index on a `[0, 1]` axis: gray gridlines at 0,
/// 0.5 and 1, the curve in blue, the chosen view as a red vertical line.
pub fn ratio_plot(ratios: &[f64], anchor: Option<usize>, width: usize, height: usize) -> Image {
    let mut img = Image::filled(width, height, 3, 1.0);
    let margin = 8usize;
    let (pw, ph) = (width.saturating_sub(2 * margin).max(1), height.saturating_sub(2 * margin).max(1));
    let to_px = |i: f64, r: f64| {
        let n = (ratios.len().max(2) - 1) as f64;
        let x = margin as f64 + i / n * (pw - 1) as f64;
        let y = margin as f64 + (1.0 - r.clamp(0.0, 1.0)) * (ph - 1) as f64;
        (x.round() as i64, y.round() as i64)
    };
    let put = |img: &mut Image, x: i64, y: i64, rgb: [f64; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            for (c, v) in rgb.iter().enumerate() {
                img.set(x as usize, y as usize, c, *v);
            }
        }
    };
    for r in [0.0, 0.5, 1.0] {
        let (_, y) = to_px(0.0, r);
        for x in margin..margin + pw {
            put(&mut img, x as i64, y, [0.75, 0.75, 0.75]);
        }
    }
    if let Some(a) = anchor {
        let (x, _) = to_px(a as f64, 0.0);
        for y in margin..margin + ph {
            put(&mut img, x, y as i64, [0.9, 0.1, 0.1]);
        }
    }
    for (i, pair) in ratios.windows(2).enumerate() {
        let (x0, y0) = to_px(i as f64, pair[0]);
        let (x1, y1) = to_px(i as f64 + 1.0, pair[1]);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            put(&mut img, x, y, [0.1, 0.2, 0.8]);
        }
    }
    img
}
