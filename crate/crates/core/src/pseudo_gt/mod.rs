//! Detail synthesis for pseudo-ground-truth: upscaled zoom-in targets and
//! bootstrapped regenerations.
//!
//! Backends implement [`Synthesizer`]. [`SyntheticBackend`] is a pure,
//! seeded stand-in that keeps every generated tile consistent with its
//! source pixel; [`RemoteSynthesizer`] talks to an external diffusion
//! service.

mod remote;
mod synthetic;

pub use remote::{
    HttpTransport, RecordingTransport, RemoteDiffusionConfig, RemoteSynthesizer, ReplayTransport, Transport,
    TransportError, ENDPOINT_ENV,
};
pub use synthetic::{bicubic_upsample, SyntheticBackend};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::QuantImage;
use crate::rng::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Upscale(u32),
    Regenerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizerRequest {
    pub source: QuantImage,
    pub mode: Mode,
    pub seed: u64,
    pub prompt: String,
    pub guidance: f64,
    pub steps: u32,
    /// Independent samples averaged per pixel before quantization.
    pub n_samples: u32,
}

impl SynthesizerRequest {
    pub fn upscale(source: QuantImage, a: u32, seed: u64) -> Self {
        let cfg = RemoteDiffusionConfig::default();
        Self {
            source,
            mode: Mode::Upscale(a),
            seed,
            prompt: cfg.upscale_prompt,
            guidance: cfg.upscale_guidance,
            steps: cfg.upscale_steps,
            n_samples: 1,
        }
    }

    pub fn regenerate(source: QuantImage, seed: u64) -> Self {
        let cfg = RemoteDiffusionConfig::default();
        Self {
            source,
            mode: Mode::Regenerate,
            seed,
            prompt: cfg.bootstrap_prompt,
            guidance: cfg.bootstrap_guidance_start,
            steps: cfg.bootstrap_steps,
            n_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Mode::Upscale(a) = self.mode {
            if ![2, 4, 8].contains(&a) {
                return Err(Error::invalid(format!("upscale factor {a} not in {{2, 4, 8}}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        if self.source.width == 0 || self.source.height == 0 {
            return Err(Error::invalid("empty source image"));
        }
        if !self.guidance.is_finite() {
            return Err(Error::invalid("guidance must be finite"));
        }
        Ok(())
    }

    /// Output size implied by the mode.
    pub fn output_size(&self) -> (u32, u32) {
        match self.mode {
            Mode::Upscale(a) => (self.source.width * a, self.source.height * a),
            Mode::Regenerate => (self.source.width, self.source.height),
        }
    }
}

pub trait Synthesizer: Send + Sync {
    fn synthesize(&self, req: &SynthesizerRequest) -> Result<QuantImage>;
}

/// Validates the request, runs the backend and checks the output size.
pub fn synthesize(req: &SynthesizerRequest, backend: &dyn Synthesizer) -> Result<QuantImage> {
    req.validate()?;
    let out = backend.synthesize(req)?;
    let (w, h) = req.output_size();
    if out.width != w || out.height != h {
        return Err(Error::Protocol(format!(
            "backend returned {}x{}, expected {w}x{h}",
            out.width, out.height
        )));
    }
    Ok(out)
}

/// Runs requests with at most `max_in_flight` outstanding at once. Results
/// come back in request order.
pub fn synthesize_all(
    reqs: &[SynthesizerRequest],
    backend: &dyn Synthesizer,
    max_in_flight: usize,
) -> Vec<Result<QuantImage>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = max_in_flight.max(1).min(reqs.len());
    if workers <= 1 {
        return reqs.iter().map(|r| synthesize(r, backend)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<QuantImage>>>> = reqs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= reqs.len() {
                    break;
                }
                let r = synthesize(&reqs[i], backend);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub seed: u64,
    pub prompt: String,
    pub steps: u32,
    pub guidance: f64,
    pub n_samples: u32,
    pub max_in_flight: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        let r = RemoteDiffusionConfig::default();
        Self {
            seed: r.seed,
            prompt: r.bootstrap_prompt,
            steps: r.bootstrap_steps,
            guidance: r.bootstrap_guidance_start,
            n_samples: 1,
            max_in_flight: r.max_in_flight,
        }
    }
}

/// Regenerates each render once. Render `i` uses seed `mix(seed, i)`.
pub fn bootstrap_regenerate(
    renders: &[QuantImage],
    cfg: &BootstrapConfig,
    backend: &dyn Synthesizer,
) -> Result<Vec<QuantImage>> {
    if renders.is_empty() {
        return Err(Error::invalid("bootstrap needs at least one render"));
    }
    let reqs: Vec<SynthesizerRequest> = renders
        .iter()
        .enumerate()
        .map(|(i, r)| SynthesizerRequest {
            source: r.clone(),
            mode: Mode::Regenerate,
            seed: mix(&[cfg.seed, i as u64]),
            prompt: cfg.prompt.clone(),
            guidance: cfg.guidance,
            steps: cfg.steps,
            n_samples: cfg.n_samples,
        })
        .collect();
    synthesize_all(&reqs, backend, cfg.max_in_flight).into_iter().collect()
}

/// Guidance for the bootstrap refresh at `progress` in `[0, 1]`, decaying
/// linearly from the configured start to end value.
pub fn bootstrap_guidance(cfg: &RemoteDiffusionConfig, progress: f64) -> f64 {
    let t = progress.clamp(0.0, 1.0);
    cfg.bootstrap_guidance_start + (cfg.bootstrap_guidance_end - cfg.bootstrap_guidance_start) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;
    impl Synthesizer for Echo {
        fn synthesize(&self, req: &SynthesizerRequest) -> Result<QuantImage> {
            Ok(req.source.clone())
        }
    }

    #[test]
    fn request_validation() {
        let img = QuantImage::filled(4, 4, [1; 3]);
        assert!(SynthesizerRequest::upscale(img.clone(), 3, 0).validate().is_err());
        let mut r = SynthesizerRequest::upscale(img.clone(), 4, 0);
        assert_eq!(r.output_size(), (16, 16));
        r.n_samples = 0;
        assert!(r.validate().is_err());
        assert_eq!(SynthesizerRequest::regenerate(img, 0).output_size(), (4, 4));
    }

    #[test]
    fn size_mismatch_is_protocol_error() {
        let req = SynthesizerRequest::upscale(QuantImage::filled(4, 4, [1; 3]), 2, 0);
        assert!(matches!(synthesize(&req, &Echo), Err(Error::Protocol(_))));
    }

    #[test]
    fn batch_preserves_order() {
        let reqs: Vec<_> = (0..9)
            .map(|i| SynthesizerRequest::regenerate(QuantImage::filled(2, 2, [i as u8; 3]), i))
            .collect();
        let out = synthesize_all(&reqs, &Echo, 4);
        for (i, r) in out.into_iter().enumerate() {
            assert_eq!(r.unwrap().data[0], i as u8);
        }
    }

    #[test]
    fn guidance_decays() {
        let c = RemoteDiffusionConfig::default();
        assert!((bootstrap_guidance(&c, 0.0) - 0.06).abs() < 1e-15);
        assert!((bootstrap_guidance(&c, 1.0) - 0.01).abs() < 1e-15);
        assert!((bootstrap_guidance(&c, 0.5) - 0.035).abs() < 1e-15);
    }
}
