use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Mat3, Vec3};

/// Pinhole camera. `orientation` is the world-to-camera rotation; its rows
/// are the camera's right, down and forward axes expressed in world space.
/// The principal point sits at the image center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "CameraJson", try_from = "CameraJson")]
pub struct Camera {
    pub position: Vec3,
    pub orientation: Mat3,
    pub fov_x: f64,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

/// On-disk camera document.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraJson {
    position: [f64; 3],
    orientation: [f64; 9],
    fov_x: f64,
    fov_y: f64,
    width: u32,
    height: u32,
    near: f64,
    far: f64,
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let mut orientation = [0.0; 9];
        for r in 0..3 {
            for k in 0..3 {
                orientation[r * 3 + k] = c.orientation[(r, k)];
            }
        }
        CameraJson {
            position: [c.position.x, c.position.y, c.position.z],
            orientation,
            fov_x: c.fov_x,
            fov_y: c.fov_y,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        let cam = Camera {
            position: Vec3::from(j.position),
            orientation: Mat3::from_row_slice(&j.orientation),
            fov_x: j.fov_x,
            fov_y: j.fov_y,
            width: j.width,
            height: j.height,
            near: j.near,
            far: j.far,
        };
        cam.validate()?;
        Ok(cam)
    }
}

pub const ORTHONORMAL_TOL: f64 = 1e-6;

pub fn orthonormality_error(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).abs().max()
}

impl Camera {
    /// Camera at `position` looking at `target`, with `up` the world up hint.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        fov_x: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at target coincides with position"))?;
        let down = (-up + forward * up.dot(&forward))
            .try_normalize(1e-9)
            .ok_or_else(|| Error::invalid("look_at up vector parallel to view direction"))?;
        let right = down.cross(&forward);
        let orientation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let aspect = height as f64 / width as f64;
        let fov_y = 2.0 * ((0.5 * fov_x).tan() * aspect).atan();
        let cam = Camera {
            position,
            orientation,
            fov_x,
            fov_y,
            width,
            height,
            near: 0.01,
            far: 100.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.position.iter().all(|v| v.is_finite()) {
            problems.push(format!("position {:?} not finite", self.position));
        }
        let err = orthonormality_error(&self.orientation);
        if !(err <= ORTHONORMAL_TOL) {
            problems.push(format!("orientation not orthonormal (max |R^T R - I| = {err:e})"));
        }
        for (name, fov) in [("fov_x", self.fov_x), ("fov_y", self.fov_y)] {
            if !(fov > 0.0 && fov < std::f64::consts::PI) {
                problems.push(format!("{name} = {fov} outside (0, pi)"));
            }
        }
        if self.width < 1 || self.height < 1 {
            problems.push(format!("resolution {}x{} below 1 pixel", self.width, self.height));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            problems.push(format!("need 0 < near < far, got near={} far={}", self.near, self.far));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(format!("camera: {}", problems.join("; "))))
        }
    }

    pub fn tan_half_fov_x(&self) -> f64 {
        (0.5 * self.fov_x).tan()
    }

    pub fn tan_half_fov_y(&self) -> f64 {
        (0.5 * self.fov_y).tan()
    }

    /// Focal lengths in pixels.
    pub fn focal(&self) -> (f64, f64) {
        (
            0.5 * self.width as f64 / self.tan_half_fov_x(),
            0.5 * self.height as f64 / self.tan_half_fov_y(),
        )
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.orientation * (p - self.position)
    }

    pub fn forward(&self) -> Vec3 {
        self.orientation.row(2).transpose()
    }

    /// Same view, different pixel grid.
    pub fn with_resolution(&self, width: u32, height: u32) -> Camera {
        Camera {
            width,
            height,
            ..self.clone()
        }
    }

    /// World-space direction of the ray through pixel coordinate `(u, v)`
    /// (pixel centers sit at half-integers).
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        let d_cam = Vec3::new((u - cx) / fx, (v - cy) / fy, 1.0);
        self.orientation.transpose() * d_cam
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_orthonormal_and_projects_target_to_center() {
        let cam = Camera::look_at(
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::zeros(),
            Vec3::y(),
            1.0,
            40,
            30,
        )
        .unwrap();
        assert!(orthonormality_error(&cam.orientation) < 1e-12);
        assert!((cam.orientation.determinant() - 1.0).abs() < 1e-12);
        let t = cam.world_to_camera(&Vec3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && t.z > 0.0);
        // world up appears toward the top of the image (negative v)
        let up = cam.world_to_camera(&Vec3::new(0.0, 0.5, 0.0));
        assert!(up.y < 0.0);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y(), 0.9, 16, 16).unwrap();
        let s = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(cam, back);

        let mut bad: serde_json::Value = serde_json::from_str(&s).unwrap();
        bad["near"] = serde_json::json!(200.0);
        assert!(serde_json::from_value::<Camera>(bad).is_err());
    }
}
