//! Random ground-truth scenes and camera rigs for desk-scale experiments.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::rng::{domain, substream};
use crate::scene::{normalize_quat, Gaussian, Scene, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub gaussians: usize,
    pub seed: u64,
    /// Positions are drawn from `[-bounds, bounds]^3`.
    pub bounds: f64,
    /// Scales are log-uniform in this range, as fractions of `bounds`.
    pub scale_range: (f64, f64),
    pub opacity_range: (f64, f64),
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            gaussians: 200,
            seed: 0,
            bounds: 1.0,
            scale_range: (0.04, 0.2),
            opacity_range: (0.5, 0.95),
            background: [0.0; 3],
        }
    }
}

pub fn random_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.gaussians == 0 {
        return Err(Error::invalid("scene needs at least one Gaussian"));
    }
    if !(spec.bounds > 0.0) {
        return Err(Error::invalid("bounds must be > 0"));
    }
    let (s0, s1) = spec.scale_range;
    let (o0, o1) = spec.opacity_range;
    if !(s0 > 0.0 && s0 <= s1) || !(o0 > 0.0 && o0 <= o1 && o1 < 1.0) {
        return Err(Error::invalid("bad scale or opacity range"));
    }
    let mut gaussians = Vec::with_capacity(spec.gaussians);
    for i in 0..spec.gaussians {
        let mut r = substream(spec.seed, domain::SCENE_SYNTH, i as u64);
        let b = spec.bounds;
        let pos = Vec3::new(r.random_range(-b..=b), r.random_range(-b..=b), r.random_range(-b..=b));
        let ls = |r: &mut rand_chacha::ChaCha8Rng| (r.random_range(s0.ln()..=s1.ln())).exp() * b;
        let scale = Vec3::new(ls(&mut r), ls(&mut r), ls(&mut r));
        let q: [f64; 4] = std::array::from_fn(|_| r.sample(StandardNormal));
        let q = normalize_quat(&q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
        let opacity = r.random_range(o0..=o1);
        let color = Vec3::new(r.random(), r.random(), r.random());
        gaussians.push(Gaussian::new(pos, scale, q, opacity, color));
    }
    Ok(Scene::new(gaussians, Vec3::from(spec.background)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub cameras: usize,
    pub radius: f64,
    pub fov_x: f64,
    pub width: u32,
    pub height: u32,
    /// Elevations stay within this many radians of the equator.
    pub max_elevation: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            cameras: 20,
            radius: 4.0,
            fov_x: 0.9,
            width: 64,
            height: 64,
            max_elevation: 0.9,
        }
    }
}

/// Cameras on a sphere looking at the origin: golden-angle azimuths,
/// elevations evenly spread over the allowed band.
pub fn camera_rig(spec: &RigSpec) -> Result<Vec<Camera>> {
    if spec.cameras == 0 {
        return Err(Error::invalid("rig needs at least one camera"));
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = spec.cameras;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
        let elev = spec.max_elevation * (2.0 * t - 1.0);
        let az = golden * i as f64;
        let eye = Vec3::new(elev.cos() * az.sin(), elev.sin(), -elev.cos() * az.cos()) * spec.radius;
        let cam = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), spec.fov_x, spec.width, spec.height)?;
        out.push(cam);
    }
    Ok(out)
}
