//! Weighted downsampling, rounding flexibility and the empirical checks
//! around them.
//!
//! A zoomed-in tile of `a x a` pixels `p^{ij}` maps back to one original
//! pixel via
//!
//! ```text
//! p_o = Round(sum_ij W(d^{ij}) p^{ij}),   d^{ij} = sqrt((i - a/2)^2 + (j - a/2)^2)
//! ```
//!
//! so any detail whose weighted contribution stays under half a quantization
//! step leaves `p_o` unchanged.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::camera_ops::zoom_in_camera;
use crate::error::{Error, Result};
use crate::image::{quantize, QuantImage};
use crate::raster::{render, FilterSpec};
use crate::rng::{domain, substream};
use crate::scene::Scene;

/// Distance of tile entry `(i, j)` from the tile center.
pub fn interp_distance(i: usize, j: usize, a: usize) -> Result<f64> {
    if a == 0 || i >= a || j >= a {
        return Err(Error::invalid(format!("tile index ({i}, {j}) outside a {a}x{a} tile")));
    }
    let h = a as f64 / 2.0;
    Ok(((i as f64 - h).powi(2) + (j as f64 - h).powi(2)).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WeightKernel {
    Uniform,
    /// `sigma = None` means `a / 2`.
    Gaussian { sigma: Option<f64> },
    /// Tent `max(0, 1 - d/a)`.
    Bilinear,
}

impl Default for WeightKernel {
    fn default() -> Self {
        WeightKernel::Gaussian { sigma: None }
    }
}

impl WeightKernel {
    /// Parses `uniform`, `bilinear`, `gaussian` or `gaussian:<sigma>`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "uniform" => Ok(WeightKernel::Uniform),
            "bilinear" => Ok(WeightKernel::Bilinear),
            "gaussian" => Ok(WeightKernel::Gaussian { sigma: None }),
            t => {
                let s = t
                    .strip_prefix("gaussian:")
                    .and_then(|s| s.parse::<f64>().ok())
                    .filter(|s| *s > 0.0)
                    .ok_or_else(|| Error::invalid(format!("unknown weight kernel '{t}'")))?;
                Ok(WeightKernel::Gaussian { sigma: Some(s) })
            }
        }
    }

    fn raw(&self, d: f64, a: usize) -> f64 {
        match *self {
            WeightKernel::Uniform => 1.0,
            WeightKernel::Gaussian { sigma } => {
                let s = sigma.unwrap_or(a as f64 / 2.0);
                (-0.5 * d * d / (s * s)).exp()
            }
            WeightKernel::Bilinear => (1.0 - d / a as f64).max(0.0),
        }
    }

    /// Normalized weights, row-major with `j` as the row: `w[j * a + i]`.
    pub fn weights(&self, a: usize) -> Result<Vec<f64>> {
        if a == 0 {
            return Err(Error::invalid("tile side must be >= 1"));
        }
        if let WeightKernel::Gaussian { sigma: Some(s) } = self {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("gaussian kernel sigma {s} must be > 0")));
            }
        }
        let mut w = Vec::with_capacity(a * a);
        for j in 0..a {
            for i in 0..a {
                w.push(self.raw(interp_distance(i, j, a)?, a));
            }
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::invalid(format!("{self:?} has no mass on a {a}x{a} tile")));
        }
        w.iter_mut().for_each(|v| *v /= sum);
        Ok(w)
    }
}

/// Round half up onto the 8-bit grid.
#[inline]
pub fn round_channel(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn tile_side(len: usize) -> Result<usize> {
    let a = (len as f64).sqrt().round() as usize;
    if a == 0 || a * a != len {
        return Err(Error::invalid(format!("tile of {len} pixels is not square")));
    }
    Ok(a)
}

/// Pre-rounding weighted sum of a real-valued tile, per channel.
pub fn weighted_value(tile: &[[f64; 3]], kernel: &WeightKernel) -> Result<[f64; 3]> {
    let w = kernel.weights(tile_side(tile.len())?)?;
    let mut out = [0.0; 3];
    for (p, wk) in tile.iter().zip(&w) {
        for c in 0..3 {
            out[c] += wk * p[c];
        }
    }
    Ok(out)
}

/// `Round(sum W p)` of a quantized tile given row-major.
pub fn weighted_downsample(tile: &[[u8; 3]], kernel: &WeightKernel) -> Result<[u8; 3]> {
    let real: Vec<[f64; 3]> = tile.iter().map(|p| p.map(f64::from)).collect();
    Ok(weighted_value(&real, kernel)?.map(round_channel))
}

/// Downsamples by `a` tile by tile. Both sides must be multiples of `a`.
pub fn downsample_image(img: &QuantImage, a: u32, kernel: &WeightKernel) -> Result<QuantImage> {
    if a == 0 || !img.width.is_multiple_of(a) || !img.height.is_multiple_of(a) {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible into {a}x{a} tiles",
            img.width, img.height
        )));
    }
    let w = kernel.weights(a as usize)?;
    let (ow, oh) = (img.width / a, img.height / a);
    let mut out = QuantImage::filled(ow, oh, [0; 3]);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = [0.0; 3];
            for j in 0..a {
                for i in 0..a {
                    let p = img.get(ox * a + i, oy * a + j);
                    let wk = w[(j * a + i) as usize];
                    for c in 0..3 {
                        acc[c] += wk * p[c] as f64;
                    }
                }
            }
            out.set(ox, oy, acc.map(round_channel));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlexibilityThresholds {
    /// Per-pixel deviation budget, quantized units.
    pub tau_v: f64,
    pub tau_n: f64,
    pub tau_p: f64,
}

impl Default for FlexibilityThresholds {
    fn default() -> Self {
        Self {
            tau_v: 0.49,
            tau_n: 0.1,
            tau_p: 0.01,
        }
    }
}

impl FlexibilityThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_v > 0.0) || !(self.tau_n > 0.0) || !(self.tau_p > 0.0 && self.tau_p < 1.0) {
            return Err(Error::invalid(format!("invalid thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Flexibility {
    /// The tile downsamples to `p_o` exactly.
    pub exact: bool,
    /// Every tile entry is within `tau_v` of `p_o`, which implies `exact`
    /// for normalized kernels and `tau_v < 0.5`.
    pub sufficient: bool,
}

pub fn rounding_flexible(
    p_o: [u8; 3],
    tile: &[[f64; 3]],
    kernel: &WeightKernel,
    th: &FlexibilityThresholds,
) -> Result<Flexibility> {
    let v = weighted_value(tile, kernel)?;
    let exact = v.map(round_channel) == p_o;
    // slack for values like 200.49 that are not representable
    let sufficient = tile
        .iter()
        .all(|p| (0..3).all(|c| (p[c] - p_o[c] as f64).abs() <= th.tau_v + 1e-9));
    Ok(Flexibility { exact, sufficient })
}

/// Smallest `n` with `sigma^2 / (n eps^2) <= tau_p`.
pub fn chebyshev_sample_size(sigma: f64, eps: f64, tau_p: f64) -> Result<u64> {
    if !(sigma > 0.0 && sigma.is_finite()) || !(eps > 0.0 && eps.is_finite()) || !(tau_p > 0.0 && tau_p < 1.0) {
        return Err(Error::invalid(format!(
            "chebyshev needs sigma > 0, eps > 0, 0 < tau_p < 1; got {sigma}, {eps}, {tau_p}"
        )));
    }
    let n = sigma * sigma / (tau_p * eps * eps);
    // 1 / (0.01 * 0.1^2) is 10000.000000000002 in floating point
    let r = n.round();
    let n = if (n - r).abs() <= 1e-9 * r.max(1.0) { r } else { n.ceil() };
    Ok((n as u64).max(1))
}

/// Fraction of trials where `|mean of n_s standard normals| >= tau_n`.
pub fn concentration_trial(n_s: u64, tau_n: f64, trials: u64, seed: u64) -> Result<f64> {
    if n_s == 0 || trials == 0 {
        return Err(Error::invalid("n_s and trials must be >= 1"));
    }
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, domain::CONCENTRATION, t);
            let sum: f64 = (0..n_s).map(|_| rng.sample::<f64, _>(StandardNormal)).sum();
            u64::from((sum / n_s as f64).abs() >= tau_n)
        })
        .sum();
    Ok(hits as f64 / trials as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseComparison {
    /// `E[f(mean of n_s noises)]`
    pub lhs: f64,
    /// `E[mean_i f(noise_i)]`
    pub rhs: f64,
    pub lhs_abs: f64,
    pub rhs_abs: f64,
    /// Standard error of `lhs - rhs` from the paired trials.
    pub std_err: f64,
    /// `lhs >= rhs` within three standard errors.
    pub holds: bool,
}

/// Monte-Carlo estimate of both sides of the averaged-sampling inequality
/// for a scalar test function.
///
/// `holds` compares the signed expectations. With absolute values the
/// concave `-x^2` case would fail (`1/n_s < 1`), so the signed form is the
/// one that matches Jensen's inequality.
pub fn noise_averaging_compare(
    f: impl Fn(f64) -> f64 + Sync,
    n_s: u64,
    trials: u64,
    seed: u64,
) -> Result<NoiseComparison> {
    if n_s == 0 || trials == 0 {
        return Err(Error::invalid("n_s and trials must be >= 1"));
    }
    let per_trial: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, domain::NOISE_AVERAGING, t);
            let mut sum = 0.0;
            let mut fsum = 0.0;
            for _ in 0..n_s {
                let e: f64 = rng.sample(StandardNormal);
                sum += e;
                fsum += f(e);
            }
            (f(sum / n_s as f64), fsum / n_s as f64)
        })
        .collect();
    if per_trial.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::NonFinite("test function returned a non-finite value".into()));
    }
    let n = trials as f64;
    let lhs = per_trial.iter().map(|p| p.0).sum::<f64>() / n;
    let rhs = per_trial.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_d = lhs - rhs;
    let var_d = if trials > 1 {
        per_trial.iter().map(|(a, b)| (a - b - mean_d).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std_err = (var_d / n).sqrt();
    Ok(NoiseComparison {
        lhs,
        rhs,
        lhs_abs: lhs.abs(),
        rhs_abs: rhs.abs(),
        std_err,
        holds: lhs >= rhs - 3.0 * std_err,
    })
}

/// Renders `cam` and its `a`x zoom at the same resolution, downsamples the
/// zoom by `a` and compares against the central region of the direct render
/// that the zoom covers. Returns the largest per-channel difference.
///
/// Width and height must be multiples of `2a` so the covered region lands on
/// whole pixels.
pub fn render_interp_consistency(
    scene: &Scene,
    cam: &Camera,
    a: u32,
    kernel: &WeightKernel,
    f: &FilterSpec,
) -> Result<u8> {
    if a == 0 || !cam.width.is_multiple_of(2 * a) || !cam.height.is_multiple_of(2 * a) {
        return Err(Error::invalid(format!(
            "{}x{} camera cannot be split into a centered 1/{a} region",
            cam.width, cam.height
        )));
    }
    let direct = quantize(&render(scene, cam, f)?.image)?;
    let zoom = zoom_in_camera(cam, a as f64)?;
    let zoomed = quantize(&render(scene, &zoom, f)?.image)?;
    let down = downsample_image(&zoomed, a, kernel)?;
    let (cw, ch) = (cam.width / a, cam.height / a);
    let region = direct.crop((cam.width - cw) / 2, (cam.height - ch) / 2, cw, ch)?;
    crate::image::max_abs_diff_u8(&region, &down)
}

/// One verifier line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check: String,
    pub params: serde_json::Value,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KERNELS: [WeightKernel; 4] = [
        WeightKernel::Uniform,
        WeightKernel::Gaussian { sigma: None },
        WeightKernel::Gaussian { sigma: Some(0.7) },
        WeightKernel::Bilinear,
    ];

    #[test]
    fn distance_examples() {
        assert_eq!(interp_distance(1, 1, 2).unwrap(), 0.0);
        assert_eq!(interp_distance(0, 0, 2).unwrap(), 2f64.sqrt());
        assert_eq!(interp_distance(2, 2, 4).unwrap(), 0.0);
        assert!(interp_distance(2, 0, 2).is_err());
    }

    #[test]
    fn weights_normalized() {
        for k in KERNELS {
            for a in 1..=16 {
                let w = k.weights(a).unwrap();
                assert!(w.iter().all(|v| *v >= 0.0));
                assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{k:?} a={a}");
            }
        }
    }

    #[test]
    fn downsample_examples() {
        for k in KERNELS {
            assert_eq!(weighted_downsample(&[[128; 3]; 4], &k).unwrap(), [128; 3]);
            assert_eq!(weighted_downsample(&[[128; 3]; 64], &k).unwrap(), [128; 3]);
        }
        let tile = [[0; 3], [0; 3], [0; 3], [4; 3]];
        assert_eq!(weighted_downsample(&tile, &WeightKernel::Uniform).unwrap(), [1; 3]);
        assert!(weighted_downsample(&[[0; 3]; 3], &WeightKernel::Uniform).is_err());
    }

    #[test]
    fn flexibility_examples() {
        let th = FlexibilityThresholds::default();
        let k = WeightKernel::default();
        let f = rounding_flexible([90; 3], &[[90.0; 3]; 4], &k, &th).unwrap();
        assert!(f.exact && f.sufficient);
        // exhaustive a=2 grid of perturbations in [-0.49, 0.49]
        let steps: Vec<f64> = (-7..=7).map(|s| (s as f64 * 0.07).clamp(-0.49, 0.49)).collect();
        for kern in KERNELS {
            for &d0 in &steps {
                for &d1 in &steps {
                    for &d2 in &steps {
                        for &d3 in &steps {
                            let tile = [d0, d1, d2, d3].map(|d| [200.0 + d, 3.0 - d, d.abs()]);
                            let fl = rounding_flexible([200, 3, 0], &tile, &kern, &th).unwrap();
                            assert!(fl.sufficient && fl.exact, "{kern:?} {tile:?}");
                        }
                    }
                }
            }
        }
        let mut tile = [[50.0; 3]; 4];
        tile[3] = [50.0 + 4.0 * 0.5 * 4.0; 3];
        let fl = rounding_flexible([50; 3], &tile, &WeightKernel::Uniform, &th).unwrap();
        assert!(!fl.exact && !fl.sufficient);
    }

    #[test]
    fn chebyshev_examples() {
        assert_eq!(chebyshev_sample_size(1.0, 0.5, 0.04).unwrap(), 100);
        assert_eq!(chebyshev_sample_size(1.0, 1.0, 0.01).unwrap(), 100);
        assert_eq!(chebyshev_sample_size(2.0, 0.5, 0.1).unwrap(), 160);
        assert_eq!(chebyshev_sample_size(1.0, 0.1, 0.01).unwrap(), 10_000);
        assert!(chebyshev_sample_size(0.0, 1.0, 0.5).is_err());
        assert!(chebyshev_sample_size(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn concentration_limits() {
        assert_eq!(concentration_trial(50, f64::INFINITY, 200, 1).unwrap(), 0.0);
        assert_eq!(concentration_trial(1, 0.0, 200, 1).unwrap(), 1.0);
        let a = concentration_trial(25, 0.3, 500, 9).unwrap();
        assert_eq!(a, concentration_trial(25, 0.3, 500, 9).unwrap());
    }

    #[test]
    fn concentration_within_chebyshev() {
        for (n_s, tau_n) in [(4u64, 1.0), (16, 0.5), (100, 0.2)] {
            let bound: f64 = 1.0 / (n_s as f64 * tau_n * tau_n);
            let trials = 20_000;
            let rate = concentration_trial(n_s, tau_n, trials, 3).unwrap();
            assert!(rate <= bound + 3.0 * (bound / trials as f64).sqrt(), "{n_s} {tau_n}: {rate}");
        }
    }

    #[test]
    fn noise_averaging_cases() {
        let lin = noise_averaging_compare(|x| x, 8, 20_000, 4).unwrap();
        assert!((lin.lhs - lin.rhs).abs() <= 1e-12);
        for n_s in [2, 4, 16] {
            let concave = noise_averaging_compare(|x| -x * x, n_s, 20_000, 5).unwrap();
            assert!(concave.holds);
            assert!((concave.lhs + 1.0 / n_s as f64).abs() < 0.05);
            let convex = noise_averaging_compare(|x| x * x, n_s, 20_000, 5).unwrap();
            assert!(!convex.holds);
        }
        assert!(matches!(
            noise_averaging_compare(|x| 1.0 / (x - x), 2, 10, 1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn kernel_parse() {
        assert_eq!(WeightKernel::parse("uniform").unwrap(), WeightKernel::Uniform);
        assert_eq!(
            WeightKernel::parse("gaussian:1.5").unwrap(),
            WeightKernel::Gaussian { sigma: Some(1.5) }
        );
        assert!(WeightKernel::parse("box").is_err());
    }

    proptest! {
        #[test]
        fn uniform_is_mean_then_round(a in prop::sample::select(vec![2usize, 4, 8]), seed in any::<u64>()) {
            let mut rng = substream(seed, domain::VERIFY, 0);
            let mut px = || -> u8 { rand::Rng::random(&mut rng) };
            let tile: Vec<[u8; 3]> = (0..a * a).map(|_| [px(), px(), px()]).collect();
            let got = weighted_downsample(&tile, &WeightKernel::Uniform).unwrap();
            for c in 0..3 {
                let sum: u32 = tile.iter().map(|p| p[c] as u32).sum();
                let n = (a * a) as u32;
                // integer round half up of sum / n
                let want = (2 * sum + n) / (2 * n);
                prop_assert_eq!(got[c] as u32, want);
            }
        }

        #[test]
        fn chebyshev_monotone(
            sigma in 0.1f64..5.0,
            eps in 0.05f64..2.0,
            p in 0.001f64..0.5,
            shrink in 0.1f64..1.0,
        ) {
            let n = chebyshev_sample_size(sigma, eps, p).unwrap();
            prop_assert!(chebyshev_sample_size(sigma, eps, p * shrink).unwrap() >= n);
            prop_assert!(chebyshev_sample_size(sigma, eps * shrink, p).unwrap() >= n);
            let bound = sigma * sigma / (n as f64 * eps * eps);
            prop_assert!(bound <= p * (1.0 + 1e-9));
            if n > 1 {
                let prev = sigma * sigma / ((n - 1) as f64 * eps * eps);
                prop_assert!(prev > p * (1.0 - 1e-9));
            }
        }
    }
}
