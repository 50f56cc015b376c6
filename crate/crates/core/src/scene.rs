//! Gaussian primitives, scenes and covariance construction.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion stored as `[w, x, y, z]`. Not necessarily unit length; every
/// consumer normalizes first.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn normalize_quat(q: &Quat) -> Result<Quat> {
    let n = quat_norm(q);
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::invalid(format!("quaternion {q:?} cannot be normalized")));
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// One anisotropic 3D Gaussian in optimizer parameterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub color: Vec3,
}

impl Gaussian {
    /// Builds a Gaussian from constrained values (positive scale, opacity in (0,1)).
    pub fn new(position: Vec3, scale: Vec3, rotation: Quat, opacity: f64, color: Vec3) -> Self {
        Self {
            position,
            log_scale: scale.map(f64::ln),
            rotation,
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Result<Covariance3> {
        build_covariance(&self.scale(), &normalize_quat(&self.rotation)?)
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

/// Symmetric positive semi-definite 3x3 covariance, world units squared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(pub Mat3);

impl Covariance3 {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

/// `R diag(scale^2) R^T` for a unit quaternion.
pub fn build_covariance(scale: &Vec3, rotation: &Quat) -> Result<Covariance3> {
    if !scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "covariance inputs scale={scale:?} rotation={rotation:?}"
        )));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!("scale must be positive, got {scale:?}")));
    }
    let r = quat_to_matrix(rotation);
    let m = r * Mat3::from_diagonal(scale);
    let mut cov = m * m.transpose();
    // Force exact symmetry.
    for i in 0..3 {
        for j in (i + 1)..3 {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(Covariance3(cov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub background: Vec3,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, background: Vec3) -> Self {
        Self {
            gaussians,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// `None` for scene-level problems.
    pub index: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

/// Reports every invariant violation in the scene. Never fails.
pub fn validate_scene(scene: &Scene) -> Vec<Violation> {
    let mut out = Vec::new();
    if scene.gaussians.is_empty() {
        out.push(Violation {
            index: None,
            field: "scene",
            message: "empty scene".into(),
        });
    }
    if !scene.background.iter().all(|c| (0.0..=1.0).contains(c)) {
        out.push(Violation {
            index: None,
            field: "background",
            message: format!("background {:?} outside [0,1]", scene.background),
        });
    }
    for (i, g) in scene.gaussians.iter().enumerate() {
        let before = out.len();
        let mut report = |field: &'static str, message: String| {
            out.push(Violation {
                index: Some(i),
                field,
                message,
            })
        };
        if !g.position.iter().all(|v| v.is_finite()) {
            report("position", format!("non-finite position {:?}", g.position));
        }
        let s = g.scale();
        if !s.iter().all(|v| v.is_finite() && *v > 0.0) {
            report("scale", format!("scale {s:?} not positive and finite"));
        }
        let qn = quat_norm(&g.rotation);
        if !qn.is_finite() || qn < 1e-12 {
            report("rotation", format!("quaternion norm {qn} cannot be normalized"));
        }
        let a = g.opacity();
        if !(a > 0.0 && a < 1.0) {
            report("opacity", format!("sigmoid(opacity) = {a} outside (0,1)"));
        }
        if !g.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            report("color", format!("color {:?} outside [0,1]", g.color));
        }
        if !g.is_finite() && out.len() == before {
            out.push(Violation {
                index: Some(i),
                field: "gaussian",
                message: "non-finite parameter".into(),
            });
        }
    }
    out
}
