//! Tile-based Gaussian splatting rasterizer.
//!
//! Pipeline: project every Gaussian with the local affine (EWA) approximation,
//! dilate its screen-space covariance, sort by camera depth (ties by index),
//! bin into 16x16 tiles and alpha-blend front to back per pixel.
//!
//! The screen-space footprint is a Gaussian truncated at `cull_radius_sigma`
//! standard deviations and shifted so it reaches zero continuously at the
//! cutoff:
//!
//! ```text
//! G(q) = (exp(-q/2) - exp(-r^2/2)) / (1 - exp(-r^2/2))   for q < r^2, else 0
//! ```
//!
//! where `q` is the squared Mahalanobis distance. `G(0) = 1`, and the
//! rendered image stays continuous in every parameter, which keeps finite
//! differences meaningful.

mod backward;
mod project;

pub use backward::{render_backward, GaussianGrads};
pub use project::{apply_filter, project_gaussian, projection_jacobian, Splat2D};

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::scene::{Scene, Vec3};

pub const TILE_SIZE: u32 = 16;
/// Blending stops once transmittance would fall below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
pub const MAX_ALPHA: f64 = 0.99;
/// Splats whose filtered covariance determinant is at or below this are skipped.
pub const MIN_COV_DET: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    /// Isotropic variance added to every splat, pixels squared.
    pub dilation_variance: f64,
    /// Footprint cutoff in standard deviations; also drives culling.
    pub cull_radius_sigma: f64,
    /// Splats whose undilated footprint (sqrt of the largest eigenvalue) is
    /// below this many pixels are dropped. 0 disables.
    pub min_footprint_px: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            dilation_variance: 0.3,
            cull_radius_sigma: 3.0,
            min_footprint_px: 0.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dilation_variance >= 0.0) {
            return Err(Error::invalid("dilation variance must be >= 0"));
        }
        if !(self.cull_radius_sigma > 0.0) {
            return Err(Error::invalid("cull radius must be > 0"));
        }
        if !(self.min_footprint_px >= 0.0) {
            return Err(Error::invalid("min footprint must be >= 0"));
        }
        Ok(())
    }

    /// Parses `dilation[,cull_sigma[,min_footprint]]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = FilterSpec::default();
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.is_empty() || parts.len() > 3 {
            return Err(Error::invalid(format!("filter spec '{text}' needs 1 to 3 numbers")));
        }
        let mut vals = Vec::new();
        for p in &parts {
            vals.push(
                p.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("filter spec value '{p}' is not a number")))?,
            );
        }
        spec.dilation_variance = vals[0];
        if let Some(v) = vals.get(1) {
            spec.cull_radius_sigma = *v;
        }
        if let Some(v) = vals.get(2) {
            spec.min_footprint_px = *v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Truncated, shifted Gaussian footprint.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kernel {
    pub r2: f64,
    pub floor: f64,
    pub inv_norm: f64,
}

impl Kernel {
    pub fn new(cull_radius_sigma: f64) -> Self {
        let r2 = cull_radius_sigma * cull_radius_sigma;
        let floor = (-0.5 * r2).exp();
        Self {
            r2,
            floor,
            inv_norm: 1.0 / (1.0 - floor),
        }
    }

    /// `(G, dG/dq)`; zero outside the cutoff.
    #[inline]
    pub fn eval(&self, q: f64) -> (f64, f64) {
        if !(q < self.r2) {
            return (0.0, 0.0);
        }
        let e = (-0.5 * q).exp();
        ((e - self.floor) * self.inv_norm, -0.5 * e * self.inv_norm)
    }
}

/// A projected, filtered splat ready for blending.
#[derive(Clone, Debug)]
pub(crate) struct Prepared {
    pub index: usize,
    pub depth: f64,
    pub mean: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub alpha: f64,
    pub color: Vec3,
    /// Inclusive pixel bounding box `[x0, x1] x [y0, y1]`.
    pub bbox: (u32, u32, u32, u32),
}

pub(crate) struct Frame {
    pub width: u32,
    pub height: u32,
    pub tiles_x: u32,
    /// Sorted front to back.
    pub splats: Vec<Prepared>,
    /// Per tile, indices into `splats` in blending order.
    pub bins: Vec<Vec<u32>>,
    pub kernel: Kernel,
    pub background: Vec3,
    pub skipped_singular: usize,
}

pub(crate) fn prepare(scene: &Scene, cam: &Camera, f: &FilterSpec) -> Result<Frame> {
    f.validate()?;
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    let mut skipped_singular = 0;
    let mut splats = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let Some(raw) = project_gaussian(g, i, cam, f) else {
            continue;
        };
        let s = apply_filter(&raw, f);
        if s.filtered {
            continue;
        }
        let det = s.cov2d.determinant();
        if !(det > MIN_COV_DET) {
            skipped_singular += 1;
            continue;
        }
        let conic = Matrix2::new(s.cov2d[(1, 1)], -s.cov2d[(0, 1)], -s.cov2d[(1, 0)], s.cov2d[(0, 0)]) / det;
        let radius = f.cull_radius_sigma * project::max_eigenvalue(&s.cov2d).sqrt();
        let lo = |m: f64| (m - radius - 0.5).ceil();
        let hi = |m: f64| (m + radius - 0.5).floor();
        let (x0, x1) = (lo(s.mean2d.x).max(0.0), hi(s.mean2d.x).min(w as f64 - 1.0));
        let (y0, y1) = (lo(s.mean2d.y).max(0.0), hi(s.mean2d.y).min(h as f64 - 1.0));
        if x0 > x1 || y0 > y1 {
            continue;
        }
        splats.push(Prepared {
            index: i,
            depth: s.depth,
            mean: s.mean2d,
            conic,
            alpha: g.opacity(),
            color: g.color,
            bbox: (x0 as u32, x1 as u32, y0 as u32, y1 as u32),
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (k, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = s.bbox;
        for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
            for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                bins[(ty * tiles_x + tx) as usize].push(k as u32);
            }
        }
    }
    Ok(Frame {
        width: w,
        height: h,
        tiles_x,
        splats,
        bins,
        kernel: Kernel::new(f.cull_radius_sigma),
        background: scene.background,
        skipped_singular,
    })
}

/// One splat's share of a pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: u32,
    pub g: f64,
    pub dg_dq: f64,
    pub sigma: f64,
    pub clamped: bool,
    /// Transmittance in front of this splat.
    pub t: f64,
    pub d: Vector2<f64>,
}

impl Frame {
    /// Front-to-back blend at pixel `(px, py)`. Calls `visit` for every
    /// contributing splat; returns `(color, final transmittance)`.
    #[inline]
    pub fn blend_pixel(&self, bin: &[u32], px: u32, py: u32, mut visit: impl FnMut(Contribution)) -> (Vec3, f64) {
        let center = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
        let mut t = 1.0;
        let mut c = Vec3::zeros();
        for &k in bin {
            let s = &self.splats[k as usize];
            let (x0, x1, y0, y1) = s.bbox;
            if px < x0 || px > x1 || py < y0 || py > y1 {
                continue;
            }
            let d = center - s.mean;
            let q = s.conic[(0, 0)] * d.x * d.x
                + (s.conic[(0, 1)] + s.conic[(1, 0)]) * d.x * d.y
                + s.conic[(1, 1)] * d.y * d.y;
            let (g, dg_dq) = self.kernel.eval(q);
            if g <= 0.0 {
                continue;
            }
            let raw = s.alpha * g;
            let (sigma, clamped) = if raw > MAX_ALPHA { (MAX_ALPHA, true) } else { (raw, false) };
            let next_t = t * (1.0 - sigma);
            if next_t < TRANSMITTANCE_EPS {
                break;
            }
            c += s.color * (sigma * t);
            visit(Contribution {
                splat: k,
                g,
                dg_dq,
                sigma,
                clamped,
                t,
                d,
            });
            t = next_t;
        }
        (c + self.background * t, t)
    }

    pub fn tile_rect(&self, tile: usize) -> (u32, u32, u32, u32) {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(self.width), y0, (y0 + TILE_SIZE).min(self.height))
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image: FloatImage,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    /// Number of tiles each Gaussian overlapped (0 when culled or filtered).
    pub touched_tiles: Vec<u32>,
    /// Splats dropped for a singular filtered covariance.
    pub skipped_singular: usize,
}

impl RenderOutput {
    pub fn visible(&self, i: usize) -> bool {
        self.touched_tiles[i] > 0
    }
}

pub fn render(scene: &Scene, cam: &Camera, f: &FilterSpec) -> Result<RenderOutput> {
    let frame = prepare(scene, cam, f)?;
    let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..frame.bins.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = frame.tile_rect(tile);
            let bin = &frame.bins[tile];
            let n = ((x1 - x0) * (y1 - y0)) as usize;
            let mut rgb = Vec::with_capacity(n * 3);
            let mut trans = Vec::with_capacity(n);
            for py in y0..y1 {
                for px in x0..x1 {
                    let (c, t) = frame.blend_pixel(bin, px, py, |_| {});
                    rgb.extend_from_slice(&[c.x, c.y, c.z]);
                    trans.push(t);
                }
            }
            (rgb, trans)
        })
        .collect();

    let (w, h) = (frame.width, frame.height);
    let mut image = FloatImage::filled(w, h, [0.0; 3]);
    let mut transmittance = vec![0.0; (w * h) as usize];
    for (tile, (rgb, trans)) in tiles.iter().enumerate() {
        let (x0, x1, y0, y1) = frame.tile_rect(tile);
        let tw = (x1 - x0) as usize;
        for py in y0..y1 {
            let row = (py - y0) as usize;
            let dst = image.index(x0, py);
            image.data[dst..dst + tw * 3].copy_from_slice(&rgb[row * tw * 3..(row + 1) * tw * 3]);
            let td = (py * w + x0) as usize;
            transmittance[td..td + tw].copy_from_slice(&trans[row * tw..(row + 1) * tw]);
        }
    }

    let mut touched_tiles = vec![0u32; scene.len()];
    for s in &frame.splats {
        let (x0, x1, y0, y1) = s.bbox;
        touched_tiles[s.index] = (x1 / TILE_SIZE - x0 / TILE_SIZE + 1) * (y1 / TILE_SIZE - y0 / TILE_SIZE + 1);
    }
    Ok(RenderOutput {
        image,
        transmittance,
        touched_tiles,
        skipped_singular: frame.skipped_singular,
    })
}

/// Mip-style 3D smoothing: clamps every Gaussian's scales from below so it
/// never drops under `strength` times the finest world-space pixel footprint
/// it is seen with across `cameras`. Off unless called explicitly.
pub fn smoothing_clamp_3d(scene: &Scene, cameras: &[Camera], strength: f64) -> Scene {
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        let mut max_rate: f64 = 0.0;
        for cam in cameras {
            let t = cam.world_to_camera(&g.position);
            if t.z <= cam.near {
                continue;
            }
            let (fx, fy) = cam.focal();
            let (cx, cy) = cam.principal_point();
            let u = fx * t.x / t.z + cx;
            let v = fy * t.y / t.z + cy;
            let margin = 0.15;
            let inside = u >= -margin * cam.width as f64
                && u <= (1.0 + margin) * cam.width as f64
                && v >= -margin * cam.height as f64
                && v <= (1.0 + margin) * cam.height as f64;
            if inside {
                max_rate = max_rate.max(fx.max(fy) / t.z);
            }
        }
        if max_rate > 0.0 {
            let min_scale = strength / max_rate;
            g.log_scale = g.log_scale.map(|l| l.max(min_scale.ln()));
        }
    }
    out
}
