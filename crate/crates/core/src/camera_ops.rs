//! Zoom-in, cropped and randomly perturbed camera construction.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::{orthonormality_error, Camera, ORTHONORMAL_TOL};
use crate::error::{Error, Result};
use crate::rng::{domain, mix, substream};
use crate::scene::{Mat3, Vec3};

/// How a zoom-in camera is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ZoomMode {
    /// Narrow the field of view; pose and resolution unchanged.
    #[default]
    Fov,
    /// Dolly toward the scene so content at `focus_depth` appears `a` times
    /// larger. Differs from `Fov` for content off the focus plane.
    Translate { focus_depth: f64 },
}

fn narrow(fov: f64, factor: f64) -> f64 {
    2.0 * ((0.5 * fov).tan() * factor).atan()
}

pub fn zoom_in_camera(cam: &Camera, a: f64) -> Result<Camera> {
    zoom_in_camera_with(cam, a, ZoomMode::Fov)
}

pub fn zoom_in_camera_with(cam: &Camera, a: f64, mode: ZoomMode) -> Result<Camera> {
    if !(a >= 1.0 && a.is_finite()) {
        return Err(Error::invalid(format!("zoom factor must be >= 1, got {a}")));
    }
    if a == 1.0 {
        return Ok(cam.clone());
    }
    Ok(match mode {
        ZoomMode::Fov => Camera {
            fov_x: narrow(cam.fov_x, 1.0 / a),
            fov_y: narrow(cam.fov_y, 1.0 / a),
            ..cam.clone()
        },
        ZoomMode::Translate { focus_depth } => {
            if !(focus_depth > 0.0) {
                return Err(Error::invalid("translation zoom needs a positive focus depth"));
            }
            Camera {
                position: cam.position + cam.forward() * focus_depth * (1.0 - 1.0 / a),
                ..cam.clone()
            }
        }
    })
}

/// Field-of-view narrowing plus render-size reduction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub narrow_factor: f64,
    pub render_downscale: u32,
}

impl CropSpec {
    pub fn new(narrow_factor: f64, render_downscale: u32) -> Result<Self> {
        let spec = Self {
            narrow_factor,
            render_downscale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.narrow_factor > 0.0 && self.narrow_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "narrow factor must lie in (0,1], got {}",
                self.narrow_factor
            )));
        }
        if self.render_downscale < 1 {
            return Err(Error::invalid("render downscale must be >= 1"));
        }
        Ok(())
    }
}

pub fn crop_camera(cam: &Camera, crop: &CropSpec) -> Result<Camera> {
    crop.validate()?;
    let d = crop.render_downscale;
    if !cam.width.is_multiple_of(d) || !cam.height.is_multiple_of(d) {
        return Err(Error::invalid(format!(
            "resolution {}x{} not divisible by downscale {d}",
            cam.width, cam.height
        )));
    }
    if crop.narrow_factor == 1.0 && d == 1 {
        return Ok(cam.clone());
    }
    let size = |n: u32| (crop.narrow_factor * n as f64 / d as f64).round();
    let (w, h) = (size(cam.width), size(cam.height));
    if w < 1.0 || h < 1.0 {
        return Err(Error::invalid(format!(
            "crop {crop:?} of {}x{} leaves less than one pixel",
            cam.width, cam.height
        )));
    }
    Ok(Camera {
        fov_x: narrow(cam.fov_x, crop.narrow_factor),
        fov_y: narrow(cam.fov_y, crop.narrow_factor),
        width: w as u32,
        height: h as u32,
        ..cam.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub rotation_noise: f64,
    pub translation_noise: f64,
    pub seed: u64,
}

const MAX_PERTURB_ATTEMPTS: usize = 8;

/// Gram-Schmidt on rows, repeated until orthonormal. `None` when the rows
/// are (nearly) dependent or the result would be a reflection.
pub fn orthonormalize(m: &Mat3) -> Option<Mat3> {
    let mut rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    for _ in 0..4 {
        for i in 0..3 {
            let mut r = rows[i];
            for j in 0..i {
                r -= rows[j] * rows[j].dot(&r);
            }
            let n = r.norm();
            if !(n > 1e-9) {
                return None;
            }
            rows[i] = r / n;
        }
        let out = Mat3::from_rows(&[rows[0].transpose(), rows[1].transpose(), rows[2].transpose()]);
        if orthonormality_error(&out) < ORTHONORMAL_TOL {
            return (out.determinant() > 0.0).then_some(out);
        }
    }
    None
}

pub fn perturb_camera(cam: &Camera, spec: &PerturbSpec) -> Result<Camera> {
    if !(spec.rotation_noise >= 0.0 && spec.translation_noise >= 0.0) {
        return Err(Error::invalid(format!("noise scales must be >= 0, got {spec:?}")));
    }
    if spec.rotation_noise == 0.0 && spec.translation_noise == 0.0 {
        return Ok(cam.clone());
    }
    let mut rng = substream(spec.seed, domain::CAMERA_PERTURB, 0);
    for _ in 0..MAX_PERTURB_ATTEMPTS {
        let noise = Mat3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let shift = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let Some(orientation) = orthonormalize(&(cam.orientation + noise * spec.rotation_noise)) else {
            continue;
        };
        return Ok(Camera {
            orientation,
            position: cam.position + shift * spec.translation_noise,
            ..cam.clone()
        });
    }
    Err(Error::invalid(format!(
        "perturbation produced a degenerate rotation {MAX_PERTURB_ATTEMPTS} times"
    )))
}

/// Noise used to build extra training views around a camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantNoise {
    pub rotation_noise: f64,
    pub translation_noise: f64,
}

impl VariantNoise {
    /// Random novel views for bootstrapping: rotation and translation.
    pub const BOOTSTRAP: VariantNoise = VariantNoise {
        rotation_noise: 0.2,
        translation_noise: 0.1,
    };
    /// Zoom-in views for upscaling: rotation only.
    pub const UPSCALE: VariantNoise = VariantNoise {
        rotation_noise: 0.2,
        translation_noise: 0.0,
    };
}

/// `[cam]` followed by `n_variants` perturbed copies. Each variant draws from
/// its own substream keyed by `(seed, camera_index, variant)`.
pub fn expand_training_camera(
    cam: &Camera,
    n_variants: usize,
    noise: VariantNoise,
    seed: u64,
    camera_index: u64,
) -> Result<Vec<Camera>> {
    let mut out = Vec::with_capacity(n_variants + 1);
    out.push(cam.clone());
    for k in 0..n_variants {
        let spec = PerturbSpec {
            rotation_noise: noise.rotation_noise,
            translation_noise: noise.translation_noise,
            seed: mix(&[seed, camera_index, k as u64]),
        };
        out.push(perturb_camera(cam, &spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam() -> Camera {
        let mut c = Camera::look_at(
            Vec3::new(1.0, 0.5, -4.0),
            Vec3::zeros(),
            Vec3::y(),
            2.0 * 0.5f64.atan(),
            100,
            80,
        )
        .unwrap();
        c.fov_y = 2.0 * 0.4f64.atan();
        c
    }

    #[test]
    fn zoom_identity_and_tangent() {
        let c = cam();
        assert_eq!(zoom_in_camera(&c, 1.0).unwrap(), c);
        let z = zoom_in_camera(&c, 2.0).unwrap();
        assert!(((0.5 * z.fov_x).tan() - 0.25).abs() < 1e-12);
        assert!(((0.5 * z.fov_y).tan() - 0.2).abs() < 1e-12);
        assert_eq!(z.position, c.position);
        assert_eq!(z.orientation, c.orientation);
        assert_eq!((z.width, z.height), (c.width, c.height));
        assert!(zoom_in_camera(&c, 0.5).is_err());
    }

    /// Ray-cast oracle: intersect the rays through two horizontally adjacent
    /// pixel centers with a plane at fixed depth and measure their spacing.
    fn footprint(c: &Camera, depth: f64) -> f64 {
        let (cx, cy) = c.principal_point();
        let hit = |u: f64| {
            let d = c.ray_direction(u, cy);
            let t = depth / d.dot(&c.forward());
            c.position + d * t
        };
        (hit(cx + 0.5) - hit(cx - 0.5)).norm()
    }

    #[test]
    fn zoom_shrinks_pixel_footprint_by_factor() {
        let c = cam();
        for a in [2.0, 3.0, 4.5] {
            let z = zoom_in_camera(&c, a).unwrap();
            let ratio = footprint(&c, 3.0) / footprint(&z, 3.0);
            assert!((ratio - a).abs() < 1e-9, "a={a} ratio={ratio}");
        }
    }

    #[test]
    fn translate_zoom_magnifies_focus_plane() {
        let c = cam();
        let z = zoom_in_camera_with(&c, 2.0, ZoomMode::Translate { focus_depth: 4.0 }).unwrap();
        assert_eq!(z.fov_x, c.fov_x);
        let moved = (z.position - c.position).norm();
        assert!((moved - 2.0).abs() < 1e-12);
    }

    #[test]
    fn crop_examples() {
        let mut c = cam().with_resolution(100, 100);
        c.fov_y = c.fov_x;
        let k = crop_camera(&c, &CropSpec::new(0.4, 1).unwrap()).unwrap();
        assert_eq!((k.width, k.height), (40, 40));
        assert!(((0.5 * k.fov_x).tan() - 0.4 * 0.5).abs() < 1e-12);
        let area = (k.width * k.height) as f64 / (c.width * c.height) as f64;
        assert!((area - 4.0 / 25.0).abs() < 1e-12);

        let big = c.with_resolution(256, 256);
        let k = crop_camera(&big, &CropSpec::new(0.5, 2).unwrap()).unwrap();
        assert_eq!((k.width, k.height), (64, 64));
        assert_eq!(k.width * k.height * 16, 256 * 256);

        assert_eq!(crop_camera(&c, &CropSpec::new(1.0, 1).unwrap()).unwrap(), c);
    }

    #[test]
    fn crop_errors() {
        let c = cam().with_resolution(3, 3);
        assert!(crop_camera(&c, &CropSpec { narrow_factor: 0.1, render_downscale: 1 }).is_err());
        assert!(crop_camera(&c, &CropSpec { narrow_factor: 0.5, render_downscale: 2 }).is_err());
        assert!(CropSpec::new(0.0, 1).is_err());
        assert!(CropSpec::new(1.5, 1).is_err());
    }

    #[test]
    fn perturb_zero_noise_is_identity() {
        let c = cam();
        let spec = PerturbSpec { rotation_noise: 0.0, translation_noise: 0.0, seed: 9 };
        assert_eq!(perturb_camera(&c, &spec).unwrap(), c);
        let again = orthonormalize(&c.orientation).unwrap();
        assert!((again - c.orientation).abs().max() < 1e-9);
    }

    #[test]
    fn perturb_is_orthonormal_and_deterministic() {
        let c = cam();
        for seed in 0..200 {
            let spec = PerturbSpec { rotation_noise: 0.2, translation_noise: 0.1, seed };
            let p = perturb_camera(&c, &spec).unwrap();
            assert!(orthonormality_error(&p.orientation) < 1e-6);
            assert!(p.orientation.determinant() > 0.0);
            assert_eq!(p, perturb_camera(&c, &spec).unwrap());
            assert_ne!(p.position, c.position);
        }
    }

    #[test]
    fn expand_variants() {
        let c = cam();
        assert_eq!(expand_training_camera(&c, 0, VariantNoise::BOOTSTRAP, 1, 0).unwrap(), vec![c.clone()]);
        let v = expand_training_camera(&c, 2, VariantNoise::BOOTSTRAP, 1, 0).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], c);
        assert_ne!(v[1], v[2]);
        let up = expand_training_camera(&c, 2, VariantNoise::UPSCALE, 1, 4).unwrap();
        assert!(up.iter().all(|u| u.position == c.position));
        assert!(up[1].orientation != c.orientation);
        // different camera index gives different variants
        let other = expand_training_camera(&c, 2, VariantNoise::UPSCALE, 1, 5).unwrap();
        assert_ne!(up[1], other[1]);
    }

    proptest! {
        #[test]
        fn zoom_composes(a in 1.0f64..5.0, b in 1.0f64..5.0) {
            let c = cam();
            let twice = zoom_in_camera(&zoom_in_camera(&c, a).unwrap(), b).unwrap();
            let once = zoom_in_camera(&c, a * b).unwrap();
            prop_assert!(((0.5 * twice.fov_x).tan() - (0.5 * once.fov_x).tan()).abs() < 1e-9);
            prop_assert!(((0.5 * twice.fov_y).tan() - (0.5 * once.fov_y).tan()).abs() < 1e-9);
        }

        #[test]
        fn zoom_and_crop_keep_pose(a in 1.0f64..8.0, s in 0.05f64..1.0) {
            let c = cam();
            let z = zoom_in_camera(&c, a).unwrap();
            let k = crop_camera(&c, &CropSpec::new(s, 1).unwrap()).unwrap();
            prop_assert_eq!(z.position, c.position);
            prop_assert_eq!(z.orientation, c.orientation);
            prop_assert_eq!(k.position, c.position);
            prop_assert_eq!(k.orientation, c.orientation);
        }
    }
}
