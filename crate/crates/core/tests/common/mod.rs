//! Independent oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use splatforge::raster::{apply_filter, project_gaussian, FilterSpec, GaussianGrads};
use splatforge::scene::{normalize_quat, Vec3};
use splatforge::{Camera, FloatImage, Gaussian, Scene};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_camera(rng: &mut ChaCha8Rng, width: u32, height: u32) -> Camera {
    let dir = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.6..0.6),
        rng.random_range(-1.0..1.0),
    );
    let dir = if dir.norm() < 0.2 { Vec3::new(0.0, 0.0, -1.0) } else { dir.normalize() };
    let eye = dir * rng.random_range(3.5..5.0);
    Camera::look_at(eye, Vec3::zeros(), Vec3::y(), rng.random_range(0.6..1.0), width, height).unwrap()
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, max_opacity: f64) -> Gaussian {
    let q = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    let q = normalize_quat(&q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let scale = Vec3::new(
        rng.random_range(0.04..0.4),
        rng.random_range(0.04..0.4),
        rng.random_range(0.04..0.4),
    );
    let pos = Vec3::new(
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    );
    Gaussian::new(
        pos,
        scale,
        q,
        rng.random_range(0.05..max_opacity),
        Vec3::new(rng.random(), rng.random(), rng.random()),
    )
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, max_opacity: f64) -> Scene {
    let gaussians = (0..n).map(|_| random_gaussian(rng, max_opacity)).collect();
    Scene::new(gaussians, Vec3::new(rng.random(), rng.random(), rng.random()))
}

/// Per-pixel renderer: every splat is tested against every pixel and the
/// whole visible set is sorted for each pixel independently.
pub fn naive_render(scene: &Scene, cam: &Camera, f: &FilterSpec) -> FloatImage {
    struct S {
        depth: f64,
        index: usize,
        mean: Vector2<f64>,
        inv: nalgebra::Matrix2<f64>,
        alpha: f64,
        color: Vec3,
    }
    let mut splats = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let Some(s) = project_gaussian(g, i, cam, f) else { continue };
        let s = apply_filter(&s, f);
        if s.filtered || s.cov2d.determinant() <= 1e-12 {
            continue;
        }
        splats.push(S {
            depth: s.depth,
            index: i,
            mean: s.mean2d,
            inv: s.cov2d.try_inverse().unwrap(),
            alpha: g.opacity(),
            color: g.color,
        });
    }
    let r2 = f.cull_radius_sigma * f.cull_radius_sigma;
    let floor = (-0.5 * r2).exp();
    let mut img = FloatImage::filled(cam.width, cam.height, [0.0; 3]);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let x = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut order: Vec<&S> = splats.iter().collect();
            order.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
            let mut t = 1.0;
            let mut c = Vec3::zeros();
            for s in order {
                let d = x - s.mean;
                let q = (d.transpose() * s.inv * d)[(0, 0)];
                if q >= r2 {
                    continue;
                }
                let g = ((-0.5 * q).exp() - floor) / (1.0 - floor);
                if g <= 0.0 {
                    continue;
                }
                let sigma = (s.alpha * g).min(0.99);
                if t * (1.0 - sigma) < 1e-4 {
                    break;
                }
                c += s.color * sigma * t;
                t *= 1.0 - sigma;
            }
            c += scene.background * t;
            img.set(px, py, [c.x, c.y, c.z]);
        }
    }
    img
}

pub fn weighted_sum(img: &FloatImage, weights: &FloatImage) -> f64 {
    img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

pub fn random_grad_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> FloatImage {
    let data = (0..(w * h * 3)).map(|_| rng.random_range(-1.0..1.0)).collect();
    FloatImage::from_data(w, h, data).unwrap()
}

/// A parameter slot addressed by Gaussian index, group name and component.
#[derive(Clone, Copy, Debug)]
pub struct Slot {
    pub gaussian: usize,
    pub group: &'static str,
    pub component: usize,
}

pub fn all_slots(n: usize) -> Vec<Slot> {
    let mut out = Vec::new();
    for i in 0..n {
        for (group, k) in [("position", 3), ("log_scale", 3), ("rotation", 4), ("opacity_logit", 1), ("color", 3)] {
            for c in 0..k {
                out.push(Slot { gaussian: i, group, component: c });
            }
        }
    }
    out
}

pub fn param_mut(scene: &mut Scene, s: Slot) -> &mut f64 {
    let g = &mut scene.gaussians[s.gaussian];
    match s.group {
        "position" => &mut g.position[s.component],
        "log_scale" => &mut g.log_scale[s.component],
        "rotation" => &mut g.rotation[s.component],
        "opacity_logit" => &mut g.opacity_logit,
        "color" => &mut g.color[s.component],
        _ => unreachable!(),
    }
}

pub fn analytic(grads: &GaussianGrads, s: Slot) -> f64 {
    let i = s.gaussian;
    match s.group {
        "position" => grads.position[i][s.component],
        "log_scale" => grads.log_scale[i][s.component],
        "rotation" => grads.rotation[i][s.component],
        "opacity_logit" => grads.opacity_logit[i],
        "color" => grads.color[i][s.component],
        _ => unreachable!(),
    }
}

/// Central finite difference of `loss` with respect to one slot.
pub fn central_difference(scene: &Scene, s: Slot, h: f64, loss: impl Fn(&Scene) -> f64) -> f64 {
    let mut plus = scene.clone();
    *param_mut(&mut plus, s) += h;
    let mut minus = scene.clone();
    *param_mut(&mut minus, s) -= h;
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

pub fn grads_agree(a: f64, fd: f64, rel: f64, abs: f64) -> bool {
    (a - fd).abs() <= (rel * a.abs().max(fd.abs())).max(abs)
}
