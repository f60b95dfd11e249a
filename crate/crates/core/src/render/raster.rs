use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use super::project::{backprop_splat, project_with, ProjectedSplat, ScreenGrad};
use super::{RenderSettings, SplatGradient};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scene::{Camera, Scene};

/// Color, depth and accumulated-opacity images of one rasterization pass, plus the
/// per-tile contributor lists the backward pass replays.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// H×W×3.
    pub color: Image,
    /// H×W alpha-weighted depth `Σ dᵢσᵢTᵢ` (not normalized by the mask).
    pub depth: Image,
    /// H×W accumulated opacity.
    pub mask: Image,
    pub background: Vector3<f64>,
    meta: Meta,
}

#[derive(Debug, Clone)]
struct Meta {
    settings: RenderSettings,
    camera: Camera,
    splat_count: usize,
    /// Surviving splats in global depth order.
    projected: Vec<ProjectedSplat>,
    tiles_x: usize,
    /// Per tile: indices into `projected`, front to back.
    tiles: Vec<Vec<u32>>,
    /// Per pixel: number of tile-list entries traversed before termination.
    contributors: Vec<u32>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    pub fn camera(&self) -> &Camera {
        &self.meta.camera
    }

    pub fn projected(&self) -> &[ProjectedSplat] {
        &self.meta.projected
    }

    /// Number of tile-list entries visited at pixel `(x, y)`.
    pub fn contributor_count(&self, x: usize, y: usize) -> u32 {
        self.meta.contributors[y * self.width() + x]
    }

    /// Expected depth `D / m`, with `fill` where the mask is (numerically) empty.
    pub fn normalized_depth(&self, fill: f64) -> Image {
        self.depth
            .zip_map(&self.mask, |d, m| if m > 1e-6 { d / m } else { fill })
            .expect("depth and mask share a shape")
    }
}

struct Tiling {
    tile: usize,
    tiles_x: usize,
    tiles_y: usize,
    width: usize,
    height: usize,
}

impl Tiling {
    fn new(width: usize, height: usize, tile: usize) -> Self {
        Self {
            tile,
            tiles_x: width.div_ceil(tile),
            tiles_y: height.div_ceil(tile),
            width,
            height,
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    fn pixels(&self, tile_id: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile_id % self.tiles_x, tile_id / self.tiles_x);
        let x0 = tx * self.tile;
        let y0 = ty * self.tile;
        let x1 = (x0 + self.tile).min(self.width);
        let y1 = (y0 + self.tile).min(self.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    fn tile_range(&self, lo: f64, hi: f64, n_tiles: usize) -> Option<(usize, usize)> {
        let t = self.tile as f64;
        let a = (lo / t).floor().max(0.0);
        let b = (hi / t).floor().min(n_tiles as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }

    fn bin(&self, projected: &[ProjectedSplat]) -> Vec<Vec<u32>> {
        let mut tiles = vec![Vec::new(); self.count()];
        for (i, p) in projected.iter().enumerate() {
            if p.extent <= 0.0 {
                continue;
            }
            // Pixel centers sit at integer + 0.5.
            let xr = self.tile_range(p.mean2d.x - p.extent - 0.5, p.mean2d.x + p.extent - 0.5, self.tiles_x);
            let yr = self.tile_range(p.mean2d.y - p.extent - 0.5, p.mean2d.y + p.extent - 0.5, self.tiles_y);
            if let (Some((x0, x1)), Some((y0, y1))) = (xr, yr) {
                for ty in y0..=y1 {
                    for tx in x0..=x1 {
                        tiles[ty * self.tiles_x + tx].push(i as u32);
                    }
                }
            }
        }
        tiles
    }
}

#[inline]
fn gaussian_power(p: &ProjectedSplat, dx: f64, dy: f64) -> f64 {
    let c = &p.conic;
    -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy)
}

#[derive(Default, Clone, Copy)]
struct PixelResult {
    color: Vector3<f64>,
    depth: f64,
    mask: f64,
    count: u32,
}

fn composite_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    projected: &[ProjectedSplat],
    s: &RenderSettings,
) -> PixelResult {
    let mut out = PixelResult::default();
    let mut t = 1.0;
    for (k, &pi) in list.iter().enumerate() {
        if t < s.min_transmittance {
            break;
        }
        out.count = k as u32 + 1;
        let p = &projected[pi as usize];
        let alpha = p.opacity * gaussian_power(p, px - p.mean2d.x, py - p.mean2d.y).exp();
        if alpha < s.min_alpha {
            continue;
        }
        let sigma = alpha.min(s.max_alpha);
        let w = sigma * t;
        out.color += p.color * w;
        out.depth += p.depth * w;
        out.mask += w;
        t *= 1.0 - sigma;
    }
    out
}

/// Renders with [`RenderSettings::default`].
pub fn render(scene: &Scene, camera: &Camera, background: Vector3<f64>) -> Result<RenderOutput> {
    render_with(scene, camera, background, &RenderSettings::default())
}

pub fn render_with(
    scene: &Scene,
    camera: &Camera,
    background: Vector3<f64>,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    camera.validate()?;
    if settings.tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    let (w, h) = (camera.width(), camera.height());

    let mut projected: Vec<ProjectedSplat> = scene
        .splats()
        .iter()
        .enumerate()
        .filter_map(|(i, s)| project_with(s, i, camera, settings))
        .collect();
    // Stable: equal depths keep scene order.
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth));

    let tiling = Tiling::new(w, h, settings.tile_size);
    let tiles = tiling.bin(&projected);

    let shade_tile = |tile_id: usize| -> Vec<(usize, usize, PixelResult)> {
        tiling
            .pixels(tile_id)
            .map(|(x, y)| {
                let r = composite_pixel(x as f64 + 0.5, y as f64 + 0.5, &tiles[tile_id], &projected, settings);
                (x, y, r)
            })
            .collect()
    };
    let shaded: Vec<Vec<(usize, usize, PixelResult)>> = if settings.parallel {
        (0..tiling.count()).into_par_iter().map(shade_tile).collect()
    } else {
        (0..tiling.count()).map(shade_tile).collect()
    };

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut mask = Image::new(w, h, 1);
    let mut contributors = vec![0u32; w * h];
    for (x, y, r) in shaded.into_iter().flatten() {
        let rest = 1.0 - r.mask;
        for c in 0..3 {
            color.set(x, y, c, r.color[c] + background[c] * rest);
        }
        depth.set(x, y, 0, r.depth);
        mask.set(x, y, 0, r.mask);
        contributors[y * w + x] = r.count;
    }

    Ok(RenderOutput {
        color,
        depth,
        mask,
        background,
        meta: Meta {
            settings: *settings,
            camera: *camera,
            splat_count: scene.len(),
            projected,
            tiles_x: tiling.tiles_x,
            tiles,
            contributors,
        },
    })
}

struct Contribution {
    local: usize,
    sigma: f64,
    clamped: bool,
    gauss: f64,
    dx: f64,
    dy: f64,
    transmittance: f64,
}

/// Accumulates the screen-space gradients of one tile into `acc`, indexed by
/// position in the tile list.
#[allow(clippy::too_many_arguments)]
fn backward_tile(
    tiling: &Tiling,
    tile_id: usize,
    out: &RenderOutput,
    grad_color: &Image,
    grad_depth: &Image,
    grad_mask: &Image,
) -> Vec<ScreenGrad> {
    let meta = &out.meta;
    let s = &meta.settings;
    let list = &meta.tiles[tile_id];
    let mut acc = vec![ScreenGrad::default(); list.len()];
    let mut contribs: Vec<Contribution> = Vec::new();
    let bg = out.background;

    for (x, y) in tiling.pixels(tile_id) {
        let gc = Vector3::new(grad_color.get(x, y, 0), grad_color.get(x, y, 1), grad_color.get(x, y, 2));
        let gd = grad_depth.get(x, y, 0);
        let gm = grad_mask.get(x, y, 0);
        if gc == Vector3::zeros() && gd == 0.0 && gm == 0.0 {
            continue;
        }
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let n = meta.contributors[y * out.width() + x] as usize;

        contribs.clear();
        let mut t = 1.0;
        for (local, &pi) in list[..n].iter().enumerate() {
            let p = &meta.projected[pi as usize];
            let (dx, dy) = (px - p.mean2d.x, py - p.mean2d.y);
            let gauss = gaussian_power(p, dx, dy).exp();
            let alpha = p.opacity * gauss;
            if alpha < s.min_alpha {
                continue;
            }
            let sigma = alpha.min(s.max_alpha);
            contribs.push(Contribution {
                local,
                sigma,
                clamped: alpha > s.max_alpha,
                gauss,
                dx,
                dy,
                transmittance: t,
            });
            t *= 1.0 - sigma;
        }

        // Background enters through bg·(1 − m), i.e. as −g_C·bg per unit of mask.
        let bg_term = gc.dot(&bg);
        let mut suffix = 0.0;
        for c in contribs.iter().rev() {
            let p = &meta.projected[list[c.local] as usize];
            let w = gc.dot(&p.color) + gd * p.depth + gm - bg_term;
            let t_k = c.transmittance;
            let d_sigma = t_k * w - suffix / (1.0 - c.sigma);
            suffix += t_k * c.sigma * w;

            let g = &mut acc[c.local];
            let weight = c.sigma * t_k;
            g.color += gc * weight;
            g.depth += gd * weight;
            if c.clamped {
                continue;
            }
            g.opacity += d_sigma * c.gauss;
            let d_power = d_sigma * p.opacity * c.gauss;
            let conic = &p.conic;
            g.mean2d.x += d_power * (conic[(0, 0)] * c.dx + conic[(0, 1)] * c.dy);
            g.mean2d.y += d_power * (conic[(0, 1)] * c.dx + conic[(1, 1)] * c.dy);
            let off = -0.5 * c.dx * c.dy * d_power;
            g.conic += Matrix2::new(-0.5 * c.dx * c.dx * d_power, off, off, -0.5 * c.dy * c.dy * d_power);
        }
    }
    acc
}

/// Gradients of `⟨grad_color, C⟩ + ⟨grad_depth, D⟩ + ⟨grad_mask, m⟩` w.r.t. every
/// stored parameter of every splat in `scene`. Culled splats get zero.
pub fn render_backward(
    scene: &Scene,
    camera: &Camera,
    output: &RenderOutput,
    grad_color: &Image,
    grad_depth: &Image,
    grad_mask: &Image,
) -> Result<Vec<SplatGradient>> {
    let meta = &output.meta;
    if meta.splat_count != scene.len() || meta.camera != *camera {
        return Err(Error::invalid("render output was produced for a different scene or camera"));
    }
    let (w, h) = (output.width(), output.height());
    for (img, c, name) in [(grad_color, 3, "grad_color"), (grad_depth, 1, "grad_depth"), (grad_mask, 1, "grad_mask")] {
        if img.shape() != (w, h, c) {
            return Err(Error::invalid(format!(
                "{name} has shape {:?}, expected {:?}",
                img.shape(),
                (w, h, c)
            )));
        }
    }

    let tiling = Tiling::new(w, h, meta.settings.tile_size);
    debug_assert_eq!(tiling.tiles_x, meta.tiles_x);
    let per_tile = |tile_id: usize| backward_tile(&tiling, tile_id, output, grad_color, grad_depth, grad_mask);
    let tile_grads: Vec<Vec<ScreenGrad>> = if meta.settings.parallel {
        (0..tiling.count()).into_par_iter().map(per_tile).collect()
    } else {
        (0..tiling.count()).map(per_tile).collect()
    };

    // Reduce in tile order so the sum is independent of scheduling.
    let mut screen = vec![ScreenGrad::default(); meta.projected.len()];
    for (list, grads) in meta.tiles.iter().zip(&tile_grads) {
        for (&pi, g) in list.iter().zip(grads) {
            screen[pi as usize].add(g);
        }
    }

    let chain = |(p, g): (&ProjectedSplat, &ScreenGrad)| (p.index, backprop_splat(&scene.splats()[p.index], p, camera, g));
    let chained: Vec<(usize, SplatGradient)> = if meta.settings.parallel {
        meta.projected.par_iter().zip(screen.par_iter()).map(chain).collect()
    } else {
        meta.projected.iter().zip(screen.iter()).map(chain).collect()
    };
    let mut grads = vec![SplatGradient::default(); scene.len()];
    for (i, g) in chained {
        grads[i] = g;
    }
    Ok(grads)
}
