//! Photometric losses and their gradients with respect to the render.

use serde::{Deserialize, Serialize};

use super::schedule::Schedule;
use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::metrics::ssim_grad;

/// Mean absolute difference and its gradient.
pub fn l1(render: &FloatImage, target: &FloatImage) -> Result<(f64, FloatImage)> {
    render.check_same_shape(target)?;
    if render.data.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let inv = 1.0 / render.data.len() as f64;
    let mut sum = 0.0;
    let mut grad = render.clone();
    for (g, (r, t)) in grad.data.iter_mut().zip(render.data.iter().zip(&target.data)) {
        let d = r - t;
        sum += d.abs();
        *g = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
    }
    Ok((sum / render.data.len() as f64, grad))
}

/// `(1 - l) L1 + l (1 - SSIM)`.
pub fn loss_original(render: &FloatImage, gt: &FloatImage, lambda_dssim: f64) -> Result<(f64, FloatImage)> {
    let (l, mut g) = l1(render, gt)?;
    if lambda_dssim == 0.0 {
        return Ok((l, g));
    }
    let (s, gs) = ssim_grad(render, gt)?;
    for (a, b) in g.data.iter_mut().zip(&gs.data) {
        *a = (1.0 - lambda_dssim) * *a - lambda_dssim * b;
    }
    Ok(((1.0 - lambda_dssim) * l + lambda_dssim * (1.0 - s), g))
}

fn averaged_l1(pairs: &[(&FloatImage, &FloatImage)], lambda: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("loss needs at least one image pair"));
    }
    let mut sum = 0.0;
    for (r, t) in pairs {
        sum += l1(r, t)?.0;
    }
    Ok(lambda / pairs.len() as f64 * sum)
}

/// `lambda_boot / N * sum_i |render_i - regen_i|`, each term a mean over pixels.
pub fn loss_bootstrap(pairs: &[(&FloatImage, &FloatImage)], lambda_boot: f64) -> Result<f64> {
    averaged_l1(pairs, lambda_boot)
}

/// `lambda_up / M * sum_i |render_i - pseudo_gt_i|`.
pub fn loss_upscale(pairs: &[(&FloatImage, &FloatImage)], lambda_up: f64) -> Result<f64> {
    averaged_l1(pairs, lambda_up)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_boot: f64,
    pub lambda_up: f64,
    pub lambda_dssim: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_boot, self.lambda_up, self.lambda_dssim]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::invalid(format!("loss weights must be >= 0: {self:?}")));
        }
        if !(self.lambda_boot + self.lambda_up < 1.0) {
            return Err(Error::invalid(format!(
                "lambda_boot + lambda_up must be < 1, got {}",
                self.lambda_boot + self.lambda_up
            )));
        }
        if self.lambda_dssim > 1.0 {
            return Err(Error::invalid("lambda_dssim must be <= 1"));
        }
        Ok(())
    }

    /// Coefficient on the original loss.
    pub fn original_coefficient(&self) -> f64 {
        1.0 - self.lambda_boot - self.lambda_up
    }
}

/// `(1 - lambda_boot - lambda_up) L_o + L_b + L_u`; the last two already
/// carry their weights.
pub fn loss_hybrid(l_o: f64, l_b: f64, l_u: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.original_coefficient() * l_o + l_b + l_u)
}

/// Loss settings in a training config. The weight pairs hold the value for
/// the first and second half of each phase's window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_dssim: f64,
    pub boot_weights: [f64; 2],
    pub up_weights: [f64; 2],
    pub bootstrap: bool,
    pub upscale: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            boot_weights: [0.15, 0.1],
            up_weights: [0.1, 0.05],
            bootstrap: true,
            upscale: true,
        }
    }
}

impl LossConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            out.push(format!("loss.lambda_dssim {} outside [0, 1]", self.lambda_dssim));
        }
        if self.boot_weights.iter().chain(&self.up_weights).any(|v| !(*v >= 0.0)) {
            out.push("loss weights must be >= 0".into());
        }
        let max_b = self.boot_weights[0].max(self.boot_weights[1]);
        let max_u = self.up_weights[0].max(self.up_weights[1]);
        if !(max_b + max_u < 1.0) {
            out.push(format!("lambda_boot + lambda_up can reach {}, must stay < 1", max_b + max_u));
        }
        out
    }

    /// Weights in effect at `iter`; a phase that is disabled or idle gets 0.
    pub fn weights_at(&self, iter: u64, schedule: &Schedule) -> LossWeights {
        let s = schedule.scaled();
        let lambda_boot = if self.bootstrap && s.boot.is_active(iter) {
            self.boot_weights[s.boot.stage(iter)]
        } else {
            0.0
        };
        let lambda_up = if self.upscale && s.up.is_active(iter) {
            self.up_weights[s.up.stage(iter)]
        } else {
            0.0
        };
        LossWeights {
            lambda_boot,
            lambda_up,
            lambda_dssim: self.lambda_dssim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};
    use rand::Rng;

    fn img(seed: u64, w: u32, h: u32) -> FloatImage {
        let mut r = substream(seed, domain::VERIFY, 2);
        FloatImage::from_data(w, h, (0..w * h * 3).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn original_loss_examples() {
        let a = img(1, 12, 12);
        assert_eq!(loss_original(&a, &a, 0.2).unwrap().0, 0.0);
        let b = img(2, 12, 12);
        let mae = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert_eq!(loss_original(&a, &b, 0.0).unwrap().0, mae);
        assert!(loss_original(&a, &img(3, 12, 11), 0.2).is_err());
    }

    #[test]
    fn original_loss_gradient() {
        // 8x8 is below the SSIM window, so exercise the L1 path there and
        // the full loss on a larger pair
        for (w, lam) in [(8u32, 0.0), (14, 0.2)] {
            let a = img(4, w, w);
            let b = img(5, w, w);
            let (_, g) = loss_original(&a, &b, lam).unwrap();
            let h = 1e-6;
            for i in (0..a.data.len()).step_by(5) {
                let mut p = a.clone();
                p.data[i] += h;
                let mut m = a.clone();
                m.data[i] -= h;
                let fd = (loss_original(&p, &b, lam).unwrap().0 - loss_original(&m, &b, lam).unwrap().0) / (2.0 * h);
                assert!((fd - g.data[i]).abs() <= 1e-3 * fd.abs().max(g.data[i].abs()) + 1e-9, "{fd} {}", g.data[i]);
            }
        }
    }

    #[test]
    fn pair_losses() {
        let a = FloatImage::filled(4, 4, [0.5; 3]);
        let b = FloatImage::filled(4, 4, [0.3; 3]);
        let c = FloatImage::filled(4, 4, [0.0; 3]);
        let d = FloatImage::filled(4, 4, [0.5; 3]);
        assert_eq!(loss_bootstrap(&[(&a, &a)], 0.15).unwrap(), 0.0);
        assert!((loss_bootstrap(&[(&a, &b)], 0.15).unwrap() - 0.03).abs() < 1e-12);
        let two = loss_bootstrap(&[(&a, &b), (&c, &d)], 0.15).unwrap();
        let one = |p: (&FloatImage, &FloatImage)| loss_bootstrap(&[p], 1.0).unwrap();
        assert!((two - 0.15 * (one((&a, &b)) + one((&c, &d))) / 2.0).abs() < 1e-12);
        assert!((loss_upscale(&[(&c, &d)], 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(loss_upscale(&[], 0.1).is_err());
    }

    #[test]
    fn hybrid_examples() {
        let w = LossWeights {
            lambda_boot: 0.15,
            lambda_up: 0.1,
            lambda_dssim: 0.2,
        };
        assert_eq!(w.original_coefficient(), 0.75);
        assert_eq!(loss_hybrid(2.0, 0.0, 0.0, &w).unwrap(), 1.5);
        let zero = LossWeights {
            lambda_boot: 0.0,
            lambda_up: 0.0,
            ..w
        };
        assert_eq!(loss_hybrid(0.37, 0.0, 0.0, &zero).unwrap(), 0.37);
        let bad = LossWeights {
            lambda_boot: 0.6,
            lambda_up: 0.4,
            ..w
        };
        assert!(loss_hybrid(1.0, 0.0, 0.0, &bad).is_err());
    }

    #[test]
    fn staged_weights() {
        let cfg = LossConfig::default();
        let s = Schedule {
            divisor: 1,
            ..Default::default()
        };
        assert_eq!(cfg.weights_at(20_100, &s).lambda_boot, 0.15);
        assert_eq!(cfg.weights_at(30_100, &s).lambda_boot, 0.1);
        assert_eq!(cfg.weights_at(21_000, &s).lambda_boot, 0.0);
        assert_eq!(cfg.weights_at(22_100, &s).lambda_up, 0.1);
        assert_eq!(cfg.weights_at(36_100, &s).lambda_up, 0.05);
        let off = LossConfig {
            upscale: false,
            ..cfg.clone()
        };
        assert_eq!(off.weights_at(22_100, &s).lambda_up, 0.0);
        assert!(LossConfig {
            boot_weights: [0.6, 0.1],
            up_weights: [0.5, 0.0],
            ..cfg
        }
        .problems()
        .len()
            == 1);
    }
}
