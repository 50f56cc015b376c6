//! Clone, split and prune.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::raster::GaussianGrads;
use crate::rng::{domain, substream};
use crate::scene::{logit, quat_to_matrix, normalize_quat, Gaussian, Scene, Vec3};

/// Children of a split shrink by this factor.
pub const SPLIT_SHRINK: f64 = 1.6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySpec {
    /// Mean screen-space position gradient norm, in normalized device units.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest scale is at most this fraction of the scene
    /// extent are cloned; larger ones are split.
    pub percent_dense: f64,
    pub max_gaussians: usize,
    /// Iterations between opacity resets; 0 disables.
    pub opacity_reset_interval: u64,
}

impl Default for DensifySpec {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            percent_dense: 0.01,
            max_gaussians: 50_000,
            opacity_reset_interval: 0,
        }
    }
}

impl DensifySpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.grad_threshold > 0.0) {
            out.push("densify.grad_threshold must be > 0".into());
        }
        if !(self.prune_opacity > 0.0) {
            out.push("densify.prune_opacity must be > 0".into());
        }
        if !(self.percent_dense > 0.0) {
            out.push("densify.percent_dense must be > 0".into());
        }
        if self.max_gaussians == 0 {
            out.push("densify.max_gaussians must be > 0".into());
        }
        out
    }
}

/// Running sums of screen-space gradient norms between densifications.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            accum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one view. Pixel gradients are converted to normalized device
    /// units so the threshold does not depend on resolution.
    pub fn add(&mut self, grads: &GaussianGrads, visible: &[bool], width: u32, height: u32) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for (i, v) in visible.iter().enumerate() {
            if *v {
                let g = grads.mean2d[i];
                self.accum[i] += (g.x * sx).hypot(g.y * sy);
                self.count[i] += 1;
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.accum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyOutcome {
    pub scene: Scene,
    /// For each output Gaussian, the input slot it continues, if any.
    pub origin: Vec<Option<usize>>,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Densification was skipped because it would exceed the cap.
    pub capped: bool,
}

fn split_children(g: &Gaussian, seed: u64, index: usize) -> [Gaussian; 2] {
    let mut rng = substream(seed, domain::DENSIFY_SPLIT, index as u64);
    let scale = g.scale();
    let rot = quat_to_matrix(&normalize_quat(&g.rotation).unwrap_or([1.0, 0.0, 0.0, 0.0]));
    let child = |rng: &mut rand_chacha::ChaCha8Rng| {
        let z = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let mut c = g.clone();
        c.position = g.position + rot * scale.component_mul(&z);
        c.log_scale = g.log_scale.map(|l| l - SPLIT_SHRINK.ln());
        c
    };
    [child(&mut rng), child(&mut rng)]
}

/// High-gradient Gaussians are cloned when small and split in two when
/// large; then everything below the opacity threshold is removed.
pub fn densify_and_prune(
    scene: &Scene,
    stats: &DensifyStats,
    spec: &DensifySpec,
    extent: f64,
    seed: u64,
) -> DensifyOutcome {
    let n = scene.len();
    let limit = spec.percent_dense * extent;
    let hot: Vec<bool> = (0..n).map(|i| stats.mean(i) >= spec.grad_threshold).collect();
    let grows = hot.iter().filter(|h| **h).count();
    let capped = n + grows > spec.max_gaussians;
    if capped {
        log::warn!("densification skipped: {n} + {grows} would exceed cap {}", spec.max_gaussians);
    }

    let mut kept: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(n + grows);
    let mut fresh: Vec<Gaussian> = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    for (i, g) in scene.gaussians.iter().enumerate() {
        if capped || !hot[i] {
            kept.push((g.clone(), Some(i)));
        } else if g.scale().max() <= limit {
            kept.push((g.clone(), Some(i)));
            fresh.push(g.clone());
            cloned += 1;
        } else {
            fresh.extend(split_children(g, seed, i));
            split += 1;
        }
    }
    kept.extend(fresh.into_iter().map(|g| (g, None)));

    let before = kept.len();
    let min_logit = logit(spec.prune_opacity.min(1.0 - 1e-12));
    kept.retain(|(g, _)| g.opacity_logit >= min_logit && spec.prune_opacity < 1.0);
    let pruned = before - kept.len();

    let (gaussians, origin): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
    DensifyOutcome {
        scene: Scene::new(gaussians, scene.background),
        origin,
        cloned,
        split,
        pruned,
        capped,
    }
}

/// Caps every opacity at `max_opacity`, the baseline's periodic reset.
pub fn reset_opacity(scene: &mut Scene, max_opacity: f64) {
    let cap = logit(max_opacity);
    for g in &mut scene.gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::raster::{render, FilterSpec};
    use crate::scene::validate_scene;

    fn scene() -> Scene {
        Scene::new(
            vec![
                Gaussian::new(Vec3::zeros(), Vec3::repeat(0.005), [1.0, 0.0, 0.0, 0.0], 0.6, Vec3::new(1.0, 0.2, 0.1)),
                Gaussian::new(Vec3::new(0.5, 0.0, 0.0), Vec3::repeat(0.3), [1.0, 0.0, 0.0, 0.0], 0.6, Vec3::repeat(0.7)),
                Gaussian::new(Vec3::new(-0.5, 0.0, 0.0), Vec3::repeat(0.1), [1.0, 0.0, 0.0, 0.0], 0.001, Vec3::repeat(0.3)),
            ],
            Vec3::zeros(),
        )
    }

    fn stats(hot: &[usize]) -> DensifyStats {
        let mut s = DensifyStats::new(3);
        for &i in hot {
            s.accum[i] = 1.0;
            s.count[i] = 1;
        }
        s
    }

    #[test]
    fn quiet_scene_only_prunes() {
        let s = scene();
        let spec = DensifySpec {
            prune_opacity: 1e-4,
            ..Default::default()
        };
        let out = densify_and_prune(&s, &stats(&[]), &spec, 1.0, 0);
        assert_eq!(out.scene, s);
        assert_eq!(out.origin, vec![Some(0), Some(1), Some(2)]);
        let out = densify_and_prune(&s, &stats(&[]), &DensifySpec::default(), 1.0, 0);
        assert_eq!(out.scene.len(), 2);
        assert_eq!(out.pruned, 1);
    }

    #[test]
    fn clone_small_split_large() {
        let s = scene();
        let spec = DensifySpec {
            prune_opacity: 1e-4,
            ..Default::default()
        };
        let out = densify_and_prune(&s, &stats(&[0, 1]), &spec, 1.0, 7);
        assert_eq!((out.cloned, out.split), (1, 1));
        assert_eq!(out.scene.len(), 5);
        assert_eq!(out.origin, vec![Some(0), Some(2), None, None, None]);
        assert_eq!(out.scene.gaussians[2], s.gaussians[0]);
        for c in &out.scene.gaussians[3..] {
            assert!((c.scale().x - 0.3 / 1.6).abs() < 1e-12);
            assert_eq!(c.opacity_logit, s.gaussians[1].opacity_logit);
        }
        assert_ne!(out.scene.gaussians[3].position, out.scene.gaussians[4].position);
    }

    #[test]
    fn cap_skips_densification() {
        let spec = DensifySpec {
            max_gaussians: 4,
            prune_opacity: 1e-4,
            ..Default::default()
        };
        let out = densify_and_prune(&scene(), &stats(&[0, 1]), &spec, 1.0, 0);
        assert!(out.capped);
        assert_eq!(out.scene.len(), 3);
    }

    #[test]
    fn prune_everything_is_flagged() {
        let spec = DensifySpec {
            prune_opacity: 1.0,
            ..Default::default()
        };
        let out = densify_and_prune(&scene(), &stats(&[]), &spec, 1.0, 0);
        assert!(out.scene.is_empty());
        assert!(!validate_scene(&out.scene).is_empty());
    }

    #[test]
    fn split_roughly_preserves_rendered_mass() {
        let g = Gaussian::new(Vec3::zeros(), Vec3::new(0.25, 0.15, 0.2), [0.9, 0.1, 0.3, 0.2], 0.9, Vec3::repeat(1.0));
        let s = Scene::new(vec![g], Vec3::zeros());
        let mut st = DensifyStats::new(1);
        st.accum[0] = 1.0;
        st.count[0] = 1;
        let out = densify_and_prune(&s, &st, &DensifySpec::default(), 1.0, 3);
        assert_eq!(out.scene.len(), 2);
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -4.0), Vec3::zeros(), Vec3::y(), 0.8, 64, 64).unwrap();
        let mass = |s: &Scene| render(s, &cam, &FilterSpec::default()).unwrap().image.data.iter().sum::<f64>();
        // two children at scale / 1.6 carry 2 / 1.6^2 of the footprint
        // integral before any overlap, so that is the ceiling
        let ratio = mass(&out.scene) / mass(&s);
        let ceiling = 2.0 / (SPLIT_SHRINK * SPLIT_SHRINK);
        assert!(ratio <= ceiling + 0.02 && ratio >= 0.7, "mass ratio {ratio}");
    }

    #[test]
    fn ndc_stats() {
        let mut grads = GaussianGrads::zeros(2);
        grads.mean2d[0] = nalgebra::Vector2::new(3e-6, 4e-6);
        grads.mean2d[1] = nalgebra::Vector2::new(1.0, 1.0);
        let mut s = DensifyStats::new(2);
        s.add(&grads, &[true, false], 2, 2);
        s.add(&grads, &[true, false], 2, 2);
        assert!((s.mean(0) - 5e-6).abs() < 1e-18);
        assert_eq!(s.count[1], 0);
        assert_eq!(s.mean(1), 0.0);
    }
}
