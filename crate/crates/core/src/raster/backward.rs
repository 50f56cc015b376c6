//! Analytic gradients of `L = sum(grad_image * render)`.
//!
//! The forward blend is recomputed per tile; per-tile partial gradients are
//! merged in tile order so results do not depend on scheduling.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;

use super::{prepare, FilterSpec, Frame};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::scene::{normalize_quat, quat_norm, quat_to_matrix, Quat, Scene, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub position: Vec<Vec3>,
    pub log_scale: Vec<Vec3>,
    pub rotation: Vec<Quat>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    /// Screen-space mean gradient, used for densification statistics.
    pub mean2d: Vec<Vector2<f64>>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            log_scale: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            mean2d: vec![Vector2::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &GaussianGrads) {
        for i in 0..self.len() {
            self.position[i] += other.position[i];
            self.log_scale[i] += other.log_scale[i];
            for k in 0..4 {
                self.rotation[i][k] += other.rotation[i][k];
            }
            self.opacity_logit[i] += other.opacity_logit[i];
            self.color[i] += other.color[i];
            self.mean2d[i] += other.mean2d[i];
        }
    }
}

/// Screen-space gradient of one splat.
#[derive(Clone, Copy, Debug)]
struct SplatGrad {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    alpha: f64,
    color: Vec3,
}

impl SplatGrad {
    fn zero() -> Self {
        Self {
            mean: Vector2::zeros(),
            conic: Matrix2::zeros(),
            alpha: 0.0,
            color: Vec3::zeros(),
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.mean += o.mean;
        self.conic += o.conic;
        self.alpha += o.alpha;
        self.color += o.color;
    }
}

fn tile_backward(frame: &Frame, tile: usize, grad: &FloatImage) -> Vec<(u32, SplatGrad)> {
    let bin = &frame.bins[tile];
    if bin.is_empty() {
        return Vec::new();
    }
    let mut local = vec![SplatGrad::zero(); bin.len()];
    let (x0, x1, y0, y1) = frame.tile_rect(tile);
    let mut contribs = Vec::new();
    for py in y0..y1 {
        for px in x0..x1 {
            let gi = grad.index(px, py);
            let g = Vec3::new(grad.data[gi], grad.data[gi + 1], grad.data[gi + 2]);
            if g == Vec3::zeros() {
                continue;
            }
            contribs.clear();
            let (_, t_final) = frame.blend_pixel(bin, px, py, |c| contribs.push(c));
            let mut behind = frame.background * t_final;
            for c in contribs.iter().rev() {
                let s = &frame.splats[c.splat as usize];
                // bins are built in ascending splat order
                let slot = bin.binary_search(&c.splat).expect("contribution comes from this bin");
                let acc = &mut local[slot];
                acc.color += g * (c.sigma * c.t);
                let d_sigma = g.dot(&(s.color * c.t - behind / (1.0 - c.sigma)));
                behind += s.color * (c.sigma * c.t);
                if c.clamped {
                    continue;
                }
                acc.alpha += d_sigma * c.g;
                let d_q = d_sigma * s.alpha * c.dg_dq;
                acc.conic += c.d * c.d.transpose() * d_q;
                acc.mean -= (s.conic + s.conic.transpose()) * c.d * d_q;
            }
        }
    }
    bin.iter()
        .zip(local)
        .filter(|(_, g)| g.alpha != 0.0 || g.color != Vec3::zeros())
        .map(|(&k, g)| (k, g))
        .collect()
}

/// d rotation-matrix / d quaternion component, for unit `[w, x, y, z]`.
fn rotation_partials(q: &Quat) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

/// Gradients of `sum(grad_image * render(scene, cam, f))` with respect to
/// every Gaussian parameter in its stored (unconstrained) form.
pub fn render_backward(
    scene: &Scene,
    cam: &Camera,
    f: &FilterSpec,
    grad_image: &FloatImage,
) -> Result<GaussianGrads> {
    if grad_image.width != cam.width || grad_image.height != cam.height {
        return Err(Error::invalid(format!(
            "gradient image {}x{} does not match camera {}x{}",
            grad_image.width, grad_image.height, cam.width, cam.height
        )));
    }
    if grad_image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient image".into()));
    }
    let frame = prepare(scene, cam, f)?;
    let partials: Vec<Vec<(u32, SplatGrad)>> = (0..frame.bins.len())
        .into_par_iter()
        .map(|tile| tile_backward(&frame, tile, grad_image))
        .collect();
    let mut screen = vec![SplatGrad::zero(); frame.splats.len()];
    for part in &partials {
        for (k, g) in part {
            screen[*k as usize].add(g);
        }
    }

    let mut out = GaussianGrads::zeros(scene.len());
    let (fx, fy) = cam.focal();
    let w = cam.orientation;
    for (sg, s) in screen.iter().zip(&frame.splats) {
        let i = s.index;
        let g = &scene.gaussians[i];
        out.color[i] = sg.color;
        let alpha = s.alpha;
        out.opacity_logit[i] = sg.alpha * alpha * (1.0 - alpha);
        out.mean2d[i] = sg.mean;

        // conic = inverse(cov2d + dilation)
        let d_cov2d = -(s.conic.transpose() * sg.conic * s.conic.transpose());

        let t = cam.world_to_camera(&g.position);
        let q = normalize_quat(&g.rotation).expect("projected Gaussians have valid rotations");
        let r = quat_to_matrix(&q);
        let scale = g.scale();
        let n = r * Matrix3::from_diagonal(&scale);
        let cov3 = n * n.transpose();
        let j = super::projection_jacobian(&t, fx, fy);
        let m = j * w;

        let d_m: Matrix2x3<f64> = d_cov2d * m * cov3.transpose() + d_cov2d.transpose() * m * cov3;
        let d_cov3 = m.transpose() * d_cov2d * m;
        let d_j = d_m * w.transpose();

        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let mut d_t = Vec3::new(
            d_j[(0, 2)] * (-fx * iz2),
            d_j[(1, 2)] * (-fy * iz2),
            d_j[(0, 0)] * (-fx * iz2)
                + d_j[(0, 2)] * (2.0 * fx * t.x * iz3)
                + d_j[(1, 1)] * (-fy * iz2)
                + d_j[(1, 2)] * (2.0 * fy * t.y * iz3),
        );
        d_t.x += sg.mean.x * fx * iz;
        d_t.y += sg.mean.y * fy * iz;
        d_t.z += -sg.mean.x * fx * t.x * iz2 - sg.mean.y * fy * t.y * iz2;
        out.position[i] = w.transpose() * d_t;

        let d_n = (d_cov3 + d_cov3.transpose()) * n;
        let d_r = d_n * Matrix3::from_diagonal(&scale);
        for k in 0..3 {
            let ds: f64 = (0..3).map(|a| d_n[(a, k)] * r[(a, k)]).sum();
            out.log_scale[i][k] = ds * scale[k];
        }
        let partial = rotation_partials(&q);
        let d_qhat: [f64; 4] = std::array::from_fn(|k| d_r.component_mul(&partial[k]).sum());
        let dot: f64 = (0..4).map(|k| d_qhat[k] * q[k]).sum();
        let norm = quat_norm(&g.rotation);
        out.rotation[i] = std::array::from_fn(|k| (d_qhat[k] - q[k] * dot) / norm);
    }
    Ok(out)
}
