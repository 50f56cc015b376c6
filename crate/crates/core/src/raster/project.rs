use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::FilterSpec;
use crate::camera::Camera;
use crate::scene::{Gaussian, Vec3};

/// A Gaussian projected onto the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    /// Pixel coordinates; pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)`.
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub index: usize,
    /// `sqrt` of the largest eigenvalue of the undilated covariance.
    pub footprint_px: f64,
    /// Set by the filter when the splat must not contribute.
    pub filtered: bool,
}

pub(crate) fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let a = m[(0, 0)];
    let c = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mid = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mid + disc
}

/// Jacobian of the pinhole projection at camera-space point `t`.
pub fn projection_jacobian(t: &Vec3, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2)
}

/// EWA projection. `None` when the Gaussian sits at or behind the near
/// plane, has an unusable covariance, or lies so far outside the image that
/// its dilated footprint cannot reach any pixel.
pub fn project_gaussian(g: &Gaussian, index: usize, cam: &Camera, f: &FilterSpec) -> Option<Splat2D> {
    let t = cam.world_to_camera(&g.position);
    if !(t.z > cam.near) {
        return None;
    }
    let cov3 = g.covariance().ok()?;
    let (fx, fy) = cam.focal();
    let (cx, cy) = cam.principal_point();
    let m = projection_jacobian(&t, fx, fy) * cam.orientation;
    let mut cov2d = m * cov3.0 * m.transpose();
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let mean2d = Vector2::new(fx * t.x / t.z + cx, fy * t.y / t.z + cy);
    if !mean2d.iter().chain(cov2d.iter()).all(|v| v.is_finite()) {
        return None;
    }

    let lambda = max_eigenvalue(&cov2d).max(0.0);
    let extent = f.cull_radius_sigma * (lambda + f.dilation_variance).sqrt();
    let (w, h) = (cam.width as f64, cam.height as f64);
    if mean2d.x < -extent || mean2d.x > w + extent || mean2d.y < -extent || mean2d.y > h + extent {
        return None;
    }
    Some(Splat2D {
        mean2d,
        cov2d,
        depth: t.z,
        index,
        footprint_px: lambda.sqrt(),
        filtered: false,
    })
}

/// Adds the dilation variance and drops sub-threshold footprints.
pub fn apply_filter(s: &Splat2D, f: &FilterSpec) -> Splat2D {
    let mut out = s.clone();
    out.cov2d += Matrix2::identity() * f.dilation_variance;
    if f.min_footprint_px > 0.0 && s.footprint_px < f.min_footprint_px {
        out.filtered = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{quat_from_axis_angle, IDENTITY_QUAT};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cam() -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -5.0), Vec3::zeros(), Vec3::y(), 0.8, 64, 48).unwrap()
    }

    fn iso(pos: Vec3, s: f64) -> Gaussian {
        Gaussian::new(pos, Vec3::new(s, s, s), IDENTITY_QUAT, 0.5, Vec3::new(1.0, 0.0, 0.0))
    }

    #[test]
    fn on_axis_isotropic_gaussian_projects_isotropically() {
        let c = cam().with_resolution(48, 48);
        let mut c = c;
        c.fov_y = c.fov_x;
        let s = project_gaussian(&iso(Vec3::zeros(), 0.2), 0, &c, &FilterSpec::default()).unwrap();
        assert_relative_eq!(s.cov2d[(0, 0)], s.cov2d[(1, 1)], epsilon = 1e-6);
        assert!(s.cov2d[(0, 1)].abs() < 1e-6);
        assert_relative_eq!(s.mean2d, Vector2::new(24.0, 24.0), epsilon = 1e-9);
    }

    #[test]
    fn doubling_depth_quarters_covariance() {
        let c = cam();
        let near = project_gaussian(&iso(Vec3::new(0.0, 0.0, 0.0), 0.1), 0, &c, &FilterSpec::default()).unwrap();
        let far = project_gaussian(&iso(Vec3::new(0.0, 0.0, 5.0), 0.1), 0, &c, &FilterSpec::default()).unwrap();
        assert_relative_eq!(near.depth * 2.0, far.depth, epsilon = 1e-12);
        assert_relative_eq!(far.cov2d * 4.0, near.cov2d, epsilon = 1e-6);
    }

    #[test]
    fn culls_behind_near_plane_and_far_outside() {
        let c = cam();
        assert!(project_gaussian(&iso(Vec3::new(0.0, 0.0, -6.0), 0.1), 0, &c, &FilterSpec::default()).is_none());
        assert!(project_gaussian(&iso(Vec3::new(40.0, 0.0, 0.0), 0.1), 0, &c, &FilterSpec::default()).is_none());
    }

    /// Central-difference Jacobian of the world-to-pixel map.
    fn fd_jacobian(c: &Camera, p: &Vec3) -> Matrix2x3<f64> {
        let (fx, fy) = c.focal();
        let (cx, cy) = c.principal_point();
        let proj = |p: &Vec3| {
            let t = c.world_to_camera(p);
            Vector2::new(fx * t.x / t.z + cx, fy * t.y / t.z + cy)
        };
        let h = 1e-6;
        let mut j = Matrix2x3::zeros();
        for k in 0..3 {
            let mut dp = Vec3::zeros();
            dp[k] = h;
            let col = (proj(&(p + dp)) - proj(&(p - dp))) / (2.0 * h);
            j.set_column(k, &col);
        }
        j
    }

    #[test]
    fn covariance_matches_finite_difference_jacobian() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let eye = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), -6.0);
            let c = Camera::look_at(eye, Vec3::zeros(), Vec3::y(), rng.random_range(0.5..1.2), 64, 64).unwrap();
            let axis = Vec3::new(rng.random(), rng.random(), rng.random::<f64>() + 0.1);
            let g = Gaussian::new(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vec3::new(rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)),
                quat_from_axis_angle(axis, rng.random_range(0.0..3.0)),
                0.5,
                Vec3::zeros(),
            );
            let s = project_gaussian(&g, 0, &c, &FilterSpec::default()).unwrap();
            let j = fd_jacobian(&c, &g.position);
            let want = j * g.covariance().unwrap().0 * j.transpose();
            let scale = want.abs().max();
            assert!((s.cov2d - want).abs().max() <= 1e-4 * scale, "{} vs {}", s.cov2d, want);
        }
    }

    #[test]
    fn filter_dilates_and_drops_small() {
        let s = Splat2D {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::identity() * 0.01,
            depth: 1.0,
            index: 0,
            footprint_px: 0.1,
            filtered: false,
        };
        let out = apply_filter(&s, &FilterSpec::default());
        assert_relative_eq!(out.cov2d, Matrix2::identity() * 0.31, epsilon = 1e-15);
        assert!(!out.filtered);
        let none = FilterSpec { dilation_variance: 0.0, ..FilterSpec::default() };
        assert_eq!(apply_filter(&s, &none), s);
        let strict = FilterSpec { min_footprint_px: 0.2, ..FilterSpec::default() };
        assert!(apply_filter(&s, &strict).filtered);
    }
}
