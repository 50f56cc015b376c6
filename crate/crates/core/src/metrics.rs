//! PSNR and SSIM on float images in `[0, 1]`.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated only where the
//! window fits inside the image, averaged over positions and channels. The
//! same code provides the analytic gradient used by the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;

/// Returned for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut g: Vec<f64> = (0..n).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Single-channel plane.
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &FloatImage, c: usize) -> Plane {
        Plane {
            w: img.width as usize,
            h: img.height as usize,
            v: img.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }
}

/// Valid separable correlation with `g`: output is `(w-n+1) x (h-n+1)`.
fn filter_valid(p: &Plane, g: &[f64]) -> Plane {
    let n = g.len();
    let (ow, oh) = (p.w + 1 - n, p.h + 1 - n);
    let mut tmp = vec![0.0; ow * p.h];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

/// Adjoint of [`filter_valid`]: scatters a `(w-n+1) x (h-n+1)` plane back to `w x h`.
fn filter_adjoint(p: &Plane, g: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = g.len();
    let mut tmp = vec![0.0; p.w * h];
    for y in 0..p.h {
        for x in 0..p.w {
            let v = p.v[y * p.w + x];
            for k in 0..n {
                tmp[(y + k) * p.w + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..p.w {
            let v = tmp[y * p.w + x];
            for k in 0..n {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

fn mul(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    }
}

/// Mean SSIM of one channel plus, optionally, its gradient with respect to `x`.
fn ssim_channel(x: &Plane, y: &Plane, prm: &SsimParams, g: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let c1 = (prm.k1).powi(2);
    let c2 = (prm.k2).powi(2);
    let mx = filter_valid(x, g);
    let my = filter_valid(y, g);
    let exx = filter_valid(&mul(x, x), g);
    let eyy = filter_valid(&mul(y, y), g);
    let exy = filter_valid(&mul(x, y), g);
    let count = mx.v.len();
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut da = vec![0.0; if want_grad { count } else { 0 }];
    let mut db = da.clone();
    let mut dc = da.clone();
    for k in 0..count {
        let (ux, uy) = (mx.v[k], my.v[k]);
        let vx = exx.v[k] - ux * ux;
        let vy = eyy.v[k] - uy * uy;
        let cxy = exy.v[k] - ux * uy;
        let n1 = 2.0 * (ux * uy) + c1;
        let n2 = 2.0 * cxy + c2;
        let d1 = ux * ux + uy * uy + c1;
        let d2 = vx + vy + c2;
        let s = (n1 * n2) / (d1 * d2);
        total += s;
        if want_grad {
            let ds_dux = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
            let ds_dvx = -s / d2;
            let ds_dcxy = 2.0 * n1 / (d1 * d2);
            da[k] = (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy) * inv;
            db[k] = ds_dvx * inv;
            dc[k] = ds_dcxy * inv;
        }
    }
    let value = total * inv;
    if !want_grad {
        return (value, None);
    }
    let wrap = |v| Plane { w: mx.w, h: mx.h, v };
    let ga = filter_adjoint(&wrap(da), g, x.w, x.h);
    let gb = filter_adjoint(&wrap(db), g, x.w, x.h);
    let gc = filter_adjoint(&wrap(dc), g, x.w, x.h);
    let grad = (0..x.v.len())
        .map(|i| ga[i] + 2.0 * x.v[i] * gb[i] + y.v[i] * gc[i])
        .collect();
    (value, Some(grad))
}

fn check_ssim_input(a: &FloatImage, b: &FloatImage, prm: &SsimParams) -> Result<()> {
    a.check_same_shape(b)?;
    let n = prm.window as u32;
    if prm.window == 0 || a.width < n || a.height < n {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {n}x{n}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

pub fn ssim_with(a: &FloatImage, b: &FloatImage, prm: &SsimParams) -> Result<f64> {
    check_ssim_input(a, b, prm)?;
    let g = gaussian_window(prm.window, prm.sigma);
    let sum: f64 = (0..3)
        .map(|c| ssim_channel(&Plane::channel(a, c), &Plane::channel(b, c), prm, &g, false).0)
        .sum();
    Ok(sum / 3.0)
}

pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &FloatImage, b: &FloatImage) -> Result<(f64, FloatImage)> {
    let prm = SsimParams::default();
    check_ssim_input(a, b, &prm)?;
    let g = gaussian_window(prm.window, prm.sigma);
    let mut grad = FloatImage::filled(a.width, a.height, [0.0; 3]);
    let mut total = 0.0;
    for c in 0..3 {
        let (v, gr) = ssim_channel(&Plane::channel(a, c), &Plane::channel(b, c), &prm, &g, true);
        total += v;
        for (i, d) in gr.unwrap().into_iter().enumerate() {
            grad.data[3 * i + c] = d / 3.0;
        }
    }
    Ok((total / 3.0, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn evaluate(a: &FloatImage, b: &FloatImage) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

/// Per-field mean; `None` for an empty slice.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    Some(MetricReport {
        psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, substream};
    use rand::Rng;

    fn noise(w: u32, h: u32, seed: u64) -> FloatImage {
        let mut r = substream(seed, domain::VERIFY, 0);
        FloatImage::from_data(w, h, (0..w * h * 3).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let zeros = FloatImage::filled(4, 4, [0.0; 3]);
        let ones = FloatImage::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let tenth = FloatImage::filled(4, 4, [0.1; 3]);
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&zeros, &FloatImage::filled(4, 5, [0.0; 3])).is_err());
    }

    #[test]
    fn psnr_decreases_with_amplitude() {
        let a = noise(12, 12, 2);
        let mut last = f64::INFINITY;
        for k in 1..10 {
            let b = FloatImage::from_data(12, 12, a.data.iter().map(|v| v + 0.01 * k as f64).collect()).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_examples() {
        for seed in 0..100 {
            let a = noise(16, 13, seed);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }
        let a = noise(20, 20, 7);
        let b = noise(20, 20, 8);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let neg = FloatImage::from_data(20, 20, a.data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&noise(10, 20, 1), &noise(10, 20, 2)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = noise(14, 12, 3);
        let b = noise(14, 12, 4);
        let (v, g) = ssim_grad(&a, &b).unwrap();
        assert_eq!(v, ssim(&a, &b).unwrap());
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", g.data[i]);
        }
    }
}
