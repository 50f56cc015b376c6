//! Pseudo-ground-truth caches for zoom-in upscaling and bootstrapped views.

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::camera_ops::{crop_camera, expand_training_camera, zoom_in_camera_with, CropSpec, VariantNoise, ZoomMode};
use crate::error::{Error, Result};
use crate::image::{quantize, QuantImage};
use crate::pseudo_gt::{
    bootstrap_guidance, synthesize_all, Mode, RemoteDiffusionConfig, RemoteSynthesizer, Synthesizer,
    SynthesizerRequest, SyntheticBackend,
};
use crate::raster::{render, FilterSpec};
use crate::rng::mix;
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackendConfig {
    Synthetic(SyntheticBackend),
    Remote(RemoteDiffusionConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Synthetic(SyntheticBackend::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn Synthesizer>> {
        Ok(match self {
            BackendConfig::Synthetic(b) => {
                b.validate()?;
                Box::new(*b)
            }
            BackendConfig::Remote(cfg) => Box::new(RemoteSynthesizer::new(cfg.clone().with_env_override())?),
        })
    }

    fn remote(&self) -> RemoteDiffusionConfig {
        match self {
            BackendConfig::Remote(cfg) => cfg.clone(),
            BackendConfig::Synthetic(_) => RemoteDiffusionConfig::default(),
        }
    }

    /// The remote service gets its configured seed verbatim; the synthetic
    /// backend gets a distinct seed per request.
    fn request_seed(&self, words: &[u64]) -> u64 {
        match self {
            BackendConfig::Remote(cfg) => cfg.seed,
            BackendConfig::Synthetic(_) => mix(words),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoGtConfig {
    /// Zoom factors used for upscaling.
    pub scales: Vec<u32>,
    /// Perturbed copies added next to each training camera.
    pub variants: usize,
    pub upscale_narrow: f64,
    pub bootstrap_narrow: f64,
    /// Restrict refreshes to the first K cameras.
    pub first_k: Option<usize>,
    pub zoom_mode: ZoomMode,
    pub n_samples: u32,
    /// Upscale the ground-truth crop instead of a render where the crop is
    /// pixel-aligned with the training image.
    pub use_gt_source: bool,
    pub upscale_noise: VariantNoise,
    pub bootstrap_noise: VariantNoise,
    pub backend: BackendConfig,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        Self {
            scales: vec![2],
            variants: 2,
            upscale_narrow: 0.5,
            bootstrap_narrow: 0.4,
            first_k: None,
            zoom_mode: ZoomMode::Fov,
            n_samples: 1,
            use_gt_source: true,
            upscale_noise: VariantNoise::UPSCALE,
            bootstrap_noise: VariantNoise::BOOTSTRAP,
            backend: BackendConfig::default(),
        }
    }
}

impl PseudoGtConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.scales.iter().any(|a| ![2, 4, 8].contains(a)) {
            out.push(format!("pseudo_gt.scales must be drawn from {{2, 4, 8}}, got {:?}", self.scales));
        }
        for (name, v) in [("upscale_narrow", self.upscale_narrow), ("bootstrap_narrow", self.bootstrap_narrow)] {
            if !(v > 0.0 && v <= 1.0) {
                out.push(format!("pseudo_gt.{name} must be in (0, 1], got {v}"));
            }
        }
        if self.n_samples == 0 {
            out.push("pseudo_gt.n_samples must be >= 1".into());
        }
        if self.first_k == Some(0) {
            out.push("pseudo_gt.first_k must be >= 1".into());
        }
        match &self.backend {
            BackendConfig::Synthetic(b) => {
                if let Err(e) = b.validate() {
                    out.push(format!("pseudo_gt.backend: {e}"));
                }
            }
            BackendConfig::Remote(r) => {
                if let Err(e) = r.validate() {
                    out.push(format!("pseudo_gt.backend: {e}"));
                }
            }
        }
        out
    }

    fn cameras(&self, n: usize) -> usize {
        self.first_k.map_or(n, |k| k.min(n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub camera: usize,
    /// 0 is the training camera itself.
    pub variant: usize,
    /// Zoom factor; 1 for bootstrap entries.
    pub scale: u32,
    pub epoch: u64,
    /// Camera the target is seen through during training.
    pub view: Camera,
    pub target: QuantImage,
}

impl CacheEntry {
    fn key(&self) -> (usize, usize, u32) {
        (self.camera, self.variant, self.scale)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoGtCache {
    pub upscale: Vec<CacheEntry>,
    pub bootstrap: Vec<CacheEntry>,
}

impl PseudoGtCache {
    pub fn upscale_for(&self, camera: usize) -> impl Iterator<Item = &CacheEntry> {
        self.upscale.iter().filter(move |e| e.camera == camera)
    }

    pub fn bootstrap_for(&self, camera: usize) -> impl Iterator<Item = &CacheEntry> {
        self.bootstrap.iter().filter(move |e| e.camera == camera)
    }
}

/// Everything a refresh needs besides the scene.
pub struct RefreshContext<'a> {
    pub cameras: &'a [Camera],
    pub images: &'a [QuantImage],
    pub filter: &'a FilterSpec,
    pub config: &'a PseudoGtConfig,
    pub seed: u64,
    pub epoch: u64,
}

struct Job {
    camera: usize,
    variant: usize,
    scale: u32,
    view: Camera,
    request: SynthesizerRequest,
}

fn render_quant(scene: &Scene, cam: &Camera, filter: &FilterSpec) -> Result<QuantImage> {
    quantize(&render(scene, cam, filter)?.image)
}

/// The ground-truth pixels behind `lo` when `lo` shares `full`'s pose and
/// pixel grid, centered.
fn aligned_gt_crop(full: &Camera, lo: &Camera, gt: &QuantImage, narrow: f64, a: u32) -> Option<QuantImage> {
    let exact = |n: u32| narrow * n as f64 / a as f64;
    let (ew, eh) = (exact(full.width), exact(full.height));
    if ew != lo.width as f64 || eh != lo.height as f64 {
        return None;
    }
    let (dx, dy) = (full.width - lo.width, full.height - lo.height);
    if dx % 2 != 0 || dy % 2 != 0 || gt.width != full.width || gt.height != full.height {
        return None;
    }
    gt.crop(dx / 2, dy / 2, lo.width, lo.height).ok()
}

fn merge(stale: &[CacheEntry], jobs: Vec<Job>, results: Vec<Result<QuantImage>>, epoch: u64) -> Result<Vec<CacheEntry>> {
    let mut out = Vec::with_capacity(jobs.len());
    let mut skipped = 0;
    for (job, res) in jobs.into_iter().zip(results) {
        match res {
            Ok(target) => out.push(CacheEntry {
                camera: job.camera,
                variant: job.variant,
                scale: job.scale,
                epoch,
                view: job.view,
                target,
            }),
            Err(Error::SynthesisUnavailable(msg)) => {
                skipped += 1;
                log::debug!("synthesis unavailable for camera {} variant {}: {msg}", job.camera, job.variant);
                let key = (job.camera, job.variant, job.scale);
                if let Some(old) = stale.iter().find(|e| e.key() == key) {
                    out.push(old.clone());
                }
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        log::warn!("pseudo-GT refresh at epoch {epoch}: {skipped} requests unavailable, kept stale entries");
    }
    Ok(out)
}

/// Rebuilds the upscaling cache: for each camera, each rotation-only
/// variant and each zoom factor `a`, zoom in, crop to a low-resolution view,
/// upscale it by `a` and train the result against the same view at `a`
/// times the resolution. The scene is only read.
pub fn refresh_upscale(
    scene: &Scene,
    ctx: &RefreshContext,
    stale: &[CacheEntry],
    backend: &dyn Synthesizer,
) -> Result<Vec<CacheEntry>> {
    let cfg = ctx.config;
    let remote = cfg.backend.remote();
    let mut jobs = Vec::new();
    for ci in 0..cfg.cameras(ctx.cameras.len()) {
        let views = expand_training_camera(&ctx.cameras[ci], cfg.variants, cfg.upscale_noise, ctx.seed, ci as u64)?;
        for (vi, view) in views.iter().enumerate() {
            for &a in &cfg.scales {
                let zoom = zoom_in_camera_with(view, a as f64, cfg.zoom_mode)?;
                let lo = crop_camera(&zoom, &CropSpec::new(cfg.upscale_narrow, a)?)?;
                let gt = (vi == 0 && cfg.use_gt_source && cfg.zoom_mode == ZoomMode::Fov)
                    .then(|| aligned_gt_crop(view, &lo, &ctx.images[ci], cfg.upscale_narrow, a))
                    .flatten();
                let source = match gt {
                    Some(img) => img,
                    None => render_quant(scene, &lo, ctx.filter)?,
                };
                let request = SynthesizerRequest {
                    source,
                    mode: Mode::Upscale(a),
                    seed: cfg
                        .backend
                        .request_seed(&[ctx.seed, ctx.epoch, ci as u64, vi as u64, a as u64]),
                    prompt: remote.upscale_prompt.clone(),
                    guidance: remote.upscale_guidance,
                    steps: remote.upscale_steps,
                    n_samples: cfg.n_samples,
                };
                let view = lo.with_resolution(lo.width * a, lo.height * a);
                jobs.push(Job {
                    camera: ci,
                    variant: vi,
                    scale: a,
                    view,
                    request,
                });
            }
        }
    }
    let reqs: Vec<_> = jobs.iter().map(|j| j.request.clone()).collect();
    let results = synthesize_all(&reqs, backend, remote.max_in_flight);
    merge(stale, jobs, results, ctx.epoch)
}

/// Rebuilds the bootstrap cache: novel views around each camera are cropped,
/// rendered and regenerated. `progress` in `[0, 1]` drives the guidance decay.
pub fn refresh_bootstrap(
    scene: &Scene,
    ctx: &RefreshContext,
    stale: &[CacheEntry],
    backend: &dyn Synthesizer,
    progress: f64,
) -> Result<Vec<CacheEntry>> {
    let cfg = ctx.config;
    let remote = cfg.backend.remote();
    let guidance = bootstrap_guidance(&remote, progress);
    let crop = CropSpec::new(cfg.bootstrap_narrow, 1)?;
    let mut jobs = Vec::new();
    for ci in 0..cfg.cameras(ctx.cameras.len()) {
        let views = expand_training_camera(
            &ctx.cameras[ci],
            cfg.variants,
            cfg.bootstrap_noise,
            mix(&[ctx.seed, ctx.epoch]),
            ci as u64,
        )?;
        for (vi, view) in views.iter().enumerate().skip(1) {
            let cam = crop_camera(view, &crop)?;
            let request = SynthesizerRequest {
                source: render_quant(scene, &cam, ctx.filter)?,
                mode: Mode::Regenerate,
                seed: cfg.backend.request_seed(&[ctx.seed, ctx.epoch, ci as u64, vi as u64]),
                prompt: remote.bootstrap_prompt.clone(),
                guidance,
                steps: remote.bootstrap_steps,
                n_samples: cfg.n_samples,
            };
            jobs.push(Job {
                camera: ci,
                variant: vi,
                scale: 1,
                view: cam,
                request,
            });
        }
    }
    let reqs: Vec<_> = jobs.iter().map(|j| j.request.clone()).collect();
    let results = synthesize_all(&reqs, backend, remote.max_in_flight);
    merge(stale, jobs, results, ctx.epoch)
}
