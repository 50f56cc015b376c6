//! Adam with per-group learning rates over the packed Gaussian parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::GaussianGrads;
use crate::scene::{quat_norm, Gaussian, Scene};

/// Parameters per Gaussian: position 3, log-scale 3, rotation 4, opacity 1, color 3.
pub const PARAMS: usize = 14;

pub fn pack(g: &Gaussian) -> [f64; PARAMS] {
    let mut p = [0.0; PARAMS];
    p[0..3].copy_from_slice(g.position.as_slice());
    p[3..6].copy_from_slice(g.log_scale.as_slice());
    p[6..10].copy_from_slice(&g.rotation);
    p[10] = g.opacity_logit;
    p[11..14].copy_from_slice(g.color.as_slice());
    p
}

pub fn unpack(p: &[f64; PARAMS], g: &mut Gaussian) {
    g.position.copy_from_slice(&p[0..3]);
    g.log_scale.copy_from_slice(&p[3..6]);
    g.rotation.copy_from_slice(&p[6..10]);
    g.opacity_logit = p[10];
    g.color.copy_from_slice(&p[11..14]);
}

pub fn pack_grads(grads: &GaussianGrads, i: usize) -> [f64; PARAMS] {
    let mut p = [0.0; PARAMS];
    p[0..3].copy_from_slice(grads.position[i].as_slice());
    p[3..6].copy_from_slice(grads.log_scale[i].as_slice());
    p[6..10].copy_from_slice(&grads.rotation[i]);
    p[10] = grads.opacity_logit[i];
    p[11..14].copy_from_slice(grads.color[i].as_slice());
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub position_init: f64,
    pub position_final: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn problems(&self) -> Vec<String> {
        let all = [
            self.position_init,
            self.position_final,
            self.color,
            self.opacity,
            self.scale,
            self.rotation,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Vec::new()
        } else {
            vec![format!("learning rates must be positive and finite: {self:?}")]
        }
    }

    /// Log-linear decay from init to final over `steps`, then constant.
    pub fn position_at(&self, iter: u64, steps: u64, extent: f64) -> f64 {
        let t = (iter as f64 / steps.max(1) as f64).min(1.0);
        let lr = (self.position_init.ln() * (1.0 - t) + self.position_final.ln() * t).exp();
        lr * extent
    }

    fn per_param(&self, position: f64) -> [f64; PARAMS] {
        let mut lr = [0.0; PARAMS];
        lr[0..3].fill(position);
        lr[3..6].fill(self.scale);
        lr[6..10].fill(self.rotation);
        lr[10] = self.opacity;
        lr[11..14].fill(self.color);
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<[f64; PARAMS]>,
    pub v: Vec<[f64; PARAMS]>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            step: 0,
            m: vec![[0.0; PARAMS]; n],
            v: vec![[0.0; PARAMS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. Colors are clamped to `[0, 1]` and rotations renormalized
    /// afterwards; Gaussians with a zero gradient still move on momentum.
    pub fn update(
        &mut self,
        scene: &mut Scene,
        grads: &GaussianGrads,
        lr: &LearningRates,
        position_lr: f64,
    ) -> Result<()> {
        if grads.len() != scene.len() || self.len() != scene.len() {
            return Err(Error::invalid(format!(
                "optimizer has {} slots, gradients {}, scene {}",
                self.len(),
                grads.len(),
                scene.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let rates = lr.per_param(position_lr);
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            let grad = pack_grads(grads, i);
            let mut p = pack(g);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..PARAMS {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= rates[k] * mh / (vh.sqrt() + self.eps);
            }
            unpack(&p, g);
            g.color = g.color.map(|c| c.clamp(0.0, 1.0));
            let n = quat_norm(&g.rotation);
            if n > 1e-12 {
                g.rotation = g.rotation.map(|c| c / n);
            } else {
                g.rotation = [1.0, 0.0, 0.0, 0.0];
            }
        }
        Ok(())
    }

    /// Rebuilds the moments after densification: `origin[j]` names the old
    /// slot new Gaussian `j` inherits from, or `None` for fresh zeros.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        let pick = |old: &Vec<[f64; PARAMS]>| {
            origin
                .iter()
                .map(|o| o.map_or([0.0; PARAMS], |i| old[i]))
                .collect::<Vec<_>>()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
