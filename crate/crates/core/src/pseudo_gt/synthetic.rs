//! Seeded synthesizer that needs no network.
//!
//! Upscaling is bicubic interpolation, shifted per tile so each `a x a`
//! block's weighted sum equals its source pixel. On top of that go white
//! noise with the kernel-weighted tile mean removed (so it vanishes under
//! downsampling) and a per-tile offset drawn from `[-amplitude, amplitude]`,
//! which plays the part of the sampler's misalignment and is what averaging
//! several samples shrinks. After quantization a small integer correction
//! walks tiles back to within `max(amplitude, 0.49)` of the source, so with
//! the default amplitude the quantized round trip is exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, Synthesizer, SynthesizerRequest};
use crate::error::{Error, Result};
use crate::image::QuantImage;
use crate::resampling::{round_channel, WeightKernel};
use crate::rng::{domain, mix, substream};

/// Default deviation bound, quantized units.
pub const DEFAULT_AMPLITUDE: f64 = 0.49;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBackend {
    /// Bound on each tile's downsampled deviation for upscaling, quantized
    /// units. High-frequency detail is scaled to the same value.
    pub amplitude: f64,
    /// Per-pixel perturbation bound for regeneration.
    pub regen_amplitude: f64,
    /// Kernel whose tile sums must reproduce the source.
    pub kernel: WeightKernel,
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self {
            amplitude: DEFAULT_AMPLITUDE,
            regen_amplitude: DEFAULT_AMPLITUDE,
            kernel: WeightKernel::default(),
        }
    }
}

fn cubic(t: f64) -> [f64; 4] {
    // Catmull-Rom
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

/// Bicubic upsampling by an integer factor with clamped borders. Values are
/// in quantized units and not clamped.
pub fn bicubic_upsample(src: &QuantImage, a: u32) -> Vec<f64> {
    let (w, h) = (src.width as i64, src.height as i64);
    let (ow, oh) = (src.width * a, src.height * a);
    let taps = |o: u32, n: i64| {
        let s = (o as f64 + 0.5) / a as f64 - 0.5;
        let x0 = s.floor();
        let k = cubic(s - x0);
        let idx: [usize; 4] = std::array::from_fn(|i| (x0 as i64 - 1 + i as i64).clamp(0, n - 1) as usize);
        (idx, k)
    };
    // horizontal pass
    let mut tmp = vec![0.0; (ow as usize) * (h as usize) * 3];
    for y in 0..h as usize {
        for ox in 0..ow {
            let (idx, k) = taps(ox, w);
            for c in 0..3 {
                let v: f64 = (0..4).map(|i| k[i] * src.data[(y * w as usize + idx[i]) * 3 + c] as f64).sum();
                tmp[(y * ow as usize + ox as usize) * 3 + c] = v;
            }
        }
    }
    let mut out = vec![0.0; (ow as usize) * (oh as usize) * 3];
    for oy in 0..oh {
        let (idx, k) = taps(oy, h);
        for ox in 0..ow as usize {
            for c in 0..3 {
                let v: f64 = (0..4).map(|i| k[i] * tmp[(idx[i] * ow as usize + ox) * 3 + c]).sum();
                out[(oy as usize * ow as usize + ox) * 3 + c] = v;
            }
        }
    }
    out
}

/// Flat offsets of the pixels in tile `(tx, ty)`, matching the kernel's
/// row-major weight order.
fn tile_offsets(tx: u32, ty: u32, a: u32, ow: u32) -> impl Iterator<Item = usize> {
    (0..a).flat_map(move |j| (0..a).map(move |i| ((ty * a + j) * ow + tx * a + i) as usize * 3))
}

impl SyntheticBackend {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !(self.regen_amplitude >= 0.0) {
            return Err(Error::invalid("synthetic amplitudes must be >= 0"));
        }
        Ok(())
    }

    /// One real-valued upscale sample.
    fn upscale_sample(&self, src: &QuantImage, a: u32, w: &[f64], seed: u64) -> Vec<f64> {
        let ow = src.width * a;
        let mut out = bicubic_upsample(src, a);
        let mut rng = substream(seed, domain::SYNTH_DETAIL, 0);
        let n = (a * a) as usize;
        let mut noise = vec![0.0; n];
        for ty in 0..src.height {
            for tx in 0..src.width {
                let s = src.get(tx, ty);
                let offs: Vec<usize> = tile_offsets(tx, ty, a, ow).collect();
                for c in 0..3 {
                    let sum: f64 = offs.iter().zip(w).map(|(&o, wk)| wk * out[o + c]).sum();
                    let shift = s[c] as f64 - sum;
                    for v in noise.iter_mut() {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    let wmean: f64 = noise.iter().zip(w).map(|(u, wk)| u * wk).sum();
                    let offset = self.amplitude * rng.random_range(-1.0..1.0);
                    for (k, &o) in offs.iter().enumerate() {
                        // |noise - wmean| < 2
                        let d = 0.5 * self.amplitude * (noise[k] - wmean);
                        out[o + c] = (out[o + c] + shift + d + offset).clamp(0.0, 255.0);
                    }
                }
            }
        }
        out
    }

    fn upscale(&self, req: &SynthesizerRequest, a: u32) -> Result<QuantImage> {
        let src = &req.source;
        let w = self.kernel.weights(a as usize)?;
        let mut acc = vec![0.0; (src.width * a * src.height * a * 3) as usize];
        for k in 0..req.n_samples {
            let s = self.upscale_sample(src, a, &w, mix(&[req.seed, k as u64]));
            acc.iter_mut().zip(s).for_each(|(x, v)| *x += v);
        }
        let inv = 1.0 / req.n_samples as f64;
        let mut data: Vec<u8> = acc.iter().map(|v| round_channel(v * inv)).collect();
        let tol = self.amplitude.max(DEFAULT_AMPLITUDE);
        let ow = src.width * a;
        for ty in 0..src.height {
            for tx in 0..src.width {
                let offs: Vec<usize> = tile_offsets(tx, ty, a, ow).collect();
                let s = src.get(tx, ty);
                for c in 0..3 {
                    correct_tile(&mut data, &offs, c, &w, s[c] as f64, tol);
                }
            }
        }
        QuantImage::from_data(ow, src.height * a, data)
    }

    fn regenerate(&self, req: &SynthesizerRequest) -> Result<QuantImage> {
        let src = &req.source;
        if self.regen_amplitude == 0.0 {
            return Ok(src.clone());
        }
        let mut acc = vec![0.0; src.data.len()];
        for k in 0..req.n_samples {
            let mut rng = substream(mix(&[req.seed, k as u64]), domain::SYNTH_REGEN, 0);
            for (x, &v) in acc.iter_mut().zip(&src.data) {
                *x += v as f64 + self.regen_amplitude * rng.random_range(-1.0..=1.0);
            }
        }
        let inv = 1.0 / req.n_samples as f64;
        QuantImage::from_data(src.width, src.height, acc.iter().map(|v| round_channel(v * inv)).collect())
    }
}

/// Steps single pixels by one unit until the tile's weighted sum is within
/// `tol` of `target`. Terminates with an exact fit when the largest weight
/// is at most `2 tol`.
fn correct_tile(data: &mut [u8], offs: &[usize], c: usize, w: &[f64], target: f64, tol: f64) {
    let sum = |data: &[u8]| -> f64 { offs.iter().zip(w).map(|(&o, wk)| wk * data[o + c] as f64).sum() };
    let mut s = sum(data);
    let cap = 256 * offs.len() * 4;
    for _ in 0..cap {
        let diff = target - s;
        if diff.abs() <= tol {
            return;
        }
        let up = diff > 0.0;
        let feasible = |k: usize| {
            let v = data[offs[k] + c];
            if up {
                v < 255
            } else {
                v > 0
            }
        };
        // largest weight that does not overshoot past -tol, else the smallest
        let mut best: Option<usize> = None;
        for k in 0..offs.len() {
            if !feasible(k) {
                continue;
            }
            let fits = w[k] <= diff.abs() + tol;
            best = match best {
                None => Some(k),
                Some(b) => {
                    let bfits = w[b] <= diff.abs() + tol;
                    let better = match (fits, bfits) {
                        (true, false) => true,
                        (false, true) => false,
                        (true, true) => w[k] > w[b],
                        (false, false) => w[k] < w[b],
                    };
                    Some(if better { k } else { b })
                }
            };
        }
        let Some(k) = best else { return };
        let o = offs[k] + c;
        if up {
            data[o] += 1;
            s += w[k];
        } else {
            data[o] -= 1;
            s -= w[k];
        }
    }
}

impl Synthesizer for SyntheticBackend {
    fn synthesize(&self, req: &SynthesizerRequest) -> Result<QuantImage> {
        self.validate()?;
        req.validate()?;
        match req.mode {
            Mode::Upscale(a) => self.upscale(req, a),
            Mode::Regenerate => self.regenerate(req),
        }
    }
}
