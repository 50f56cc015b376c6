//! Client for an external diffusion service.
//!
//! Wire format: `POST {endpoint}/v1/synthesize` with a JSON body
//! `{mode, scale, image_b64, prompt, steps, seed, guidance, n_samples}`
//! where `image_b64` is a base64 PNG; the reply is `{image_b64}`.
//!
//! Fixtures for offline tests are directories of `<sha256 of body>.png`.

use std::path::PathBuf;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Mode, Synthesizer, SynthesizerRequest};
use crate::error::{Error, Result};
use crate::image::QuantImage;
use crate::io::image_io::{decode_png, encode_png};

/// Overrides the configured endpoint when set.
pub const ENDPOINT_ENV: &str = "SPLATFORGE_DIFFUSION_ENDPOINT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteDiffusionConfig {
    pub endpoint: String,
    pub upscale_prompt: String,
    pub bootstrap_prompt: String,
    pub upscale_steps: u32,
    pub bootstrap_steps: u32,
    pub seed: u64,
    pub upscale_guidance: f64,
    pub bootstrap_guidance_start: f64,
    pub bootstrap_guidance_end: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteDiffusionConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            upscale_prompt: "sharp, detailed, denoise, 8k".into(),
            bootstrap_prompt: "sharp, denoise, original content, natural, detailed, 8k".into(),
            upscale_steps: 15,
            bootstrap_steps: 1,
            seed: 22,
            upscale_guidance: 1.0,
            bootstrap_guidance_start: 0.06,
            bootstrap_guidance_end: 0.01,
            timeout_secs: 120.0,
            max_retries: 3,
            retry_backoff_ms: 250,
            max_in_flight: 4,
        }
    }
}

impl RemoteDiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("diffusion endpoint is empty".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("diffusion timeout must be > 0".into()));
        }
        if self.upscale_steps == 0 || self.bootstrap_steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies [`ENDPOINT_ENV`] if it is set and nonempty.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint = url;
            }
        }
        self
    }

    pub fn url(&self) -> String {
        format!("{}/v1/synthesize", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Connection, DNS, timeout.
    Unreachable(String),
    Status(u16),
}

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError> {
        match self
            .agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
        {
            Ok(mut resp) => resp
                .body_mut()
                .with_config()
                .limit(256 << 20)
                .read_to_vec()
                .map_err(|e| TransportError::Unreachable(e.to_string())),
            Err(ureq::Error::StatusCode(code)) => Err(TransportError::Status(code)),
            Err(e) => Err(TransportError::Unreachable(e.to_string())),
        }
    }
}

pub fn request_hash(body: &[u8]) -> String {
    Sha256::digest(body).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct WireRequest<'a> {
    mode: &'a str,
    scale: u32,
    image_b64: String,
    prompt: &'a str,
    steps: u32,
    seed: u64,
    guidance: f64,
    n_samples: u32,
}

#[derive(Serialize, Deserialize)]
struct WireResponse {
    image_b64: String,
}

fn response_png(bytes: &[u8]) -> Result<Vec<u8>> {
    let resp: WireResponse =
        serde_json::from_slice(bytes).map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
    B64.decode(resp.image_b64.as_bytes())
        .map_err(|e| Error::Protocol(format!("bad base64 in response: {e}")))
}

/// Saves every successful response PNG under its request hash.
pub struct RecordingTransport<T> {
    pub inner: T,
    pub dir: PathBuf,
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post(&self, url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError> {
        let resp = self.inner.post(url, body)?;
        if let Ok(png) = response_png(&resp) {
            let path = self.dir.join(format!("{}.png", request_hash(body)));
            if let Err(e) = std::fs::write(&path, png) {
                log::warn!("could not record fixture {}: {e}", path.display());
            }
        }
        Ok(resp)
    }
}

/// Serves responses from a fixture directory; a missing fixture looks like
/// an unreachable service.
pub struct ReplayTransport {
    pub dir: PathBuf,
}

impl Transport for ReplayTransport {
    fn post(&self, _url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError> {
        let path = self.dir.join(format!("{}.png", request_hash(body)));
        let png = std::fs::read(&path)
            .map_err(|e| TransportError::Unreachable(format!("no fixture {}: {e}", path.display())))?;
        let resp = WireResponse {
            image_b64: B64.encode(png),
        };
        Ok(serde_json::to_vec(&resp).expect("plain struct serializes"))
    }
}

pub struct RemoteSynthesizer<T = HttpTransport> {
    pub cfg: RemoteDiffusionConfig,
    pub transport: T,
}

impl RemoteSynthesizer<HttpTransport> {
    pub fn new(cfg: RemoteDiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let transport = HttpTransport::new(Duration::from_secs_f64(cfg.timeout_secs));
        Ok(Self { cfg, transport })
    }
}

impl<T: Transport> RemoteSynthesizer<T> {
    pub fn with_transport(cfg: RemoteDiffusionConfig, transport: T) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, transport })
    }

    /// Exact request bytes; also the fixture key.
    pub fn request_body(req: &SynthesizerRequest) -> Result<Vec<u8>> {
        let (mode, scale) = match req.mode {
            Mode::Upscale(a) => ("upscale", a),
            Mode::Regenerate => ("regenerate", 1),
        };
        let wire = WireRequest {
            mode,
            scale,
            image_b64: B64.encode(encode_png(&req.source)?),
            prompt: &req.prompt,
            steps: req.steps,
            seed: req.seed,
            guidance: req.guidance,
            n_samples: req.n_samples,
        };
        Ok(serde_json::to_vec(&wire)?)
    }
}

impl<T: Transport> Synthesizer for RemoteSynthesizer<T> {
    fn synthesize(&self, req: &SynthesizerRequest) -> Result<QuantImage> {
        req.validate()?;
        let body = Self::request_body(req)?;
        let url = self.cfg.url();
        let mut last = TransportError::Unreachable("no attempt made".into());
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let ms = self.cfg.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                std::thread::sleep(Duration::from_millis(ms));
            }
            match self.transport.post(&url, &body) {
                Ok(bytes) => {
                    let img = decode_png(&response_png(&bytes)?)
                        .map_err(|e| Error::Protocol(format!("response image: {e}")))?;
                    let (w, h) = req.output_size();
                    if img.width != w || img.height != h {
                        return Err(Error::Protocol(format!(
                            "service returned {}x{}, expected {w}x{h}",
                            img.width, img.height
                        )));
                    }
                    return Ok(img);
                }
                Err(TransportError::Status(code)) if code < 500 => {
                    return Err(Error::Protocol(format!("{url} answered HTTP {code}")));
                }
                Err(e) => {
                    log::warn!("synthesis attempt {} failed: {e:?}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(match last {
            TransportError::Status(code) => Error::Protocol(format!("{url} answered HTTP {code}")),
            TransportError::Unreachable(msg) => Error::SynthesisUnavailable(format!("{url}: {msg}")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        fails: u32,
        calls: AtomicU32,
        err: TransportError,
    }

    impl Transport for Flaky {
        fn post(&self, _url: &str, body: &[u8]) -> std::result::Result<Vec<u8>, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fails {
                return Err(self.err.clone());
            }
            // echo the request image back upscaled 2x by pixel repetition
            let v: serde_json::Value = serde_json::from_slice(body).unwrap();
            let src = decode_png(&B64.decode(v["image_b64"].as_str().unwrap()).unwrap()).unwrap();
            let mut up = QuantImage::filled(src.width * 2, src.height * 2, [0; 3]);
            for y in 0..up.height {
                for x in 0..up.width {
                    up.set(x, y, src.get(x / 2, y / 2));
                }
            }
            let resp = WireResponse {
                image_b64: B64.encode(encode_png(&up).unwrap()),
            };
            Ok(serde_json::to_vec(&resp).unwrap())
        }
    }

    fn cfg() -> RemoteDiffusionConfig {
        RemoteDiffusionConfig {
            retry_backoff_ms: 1,
            max_retries: 2,
            ..Default::default()
        }
    }

    fn flaky(fails: u32, err: TransportError) -> RemoteSynthesizer<Flaky> {
        let t = Flaky {
            fails,
            calls: AtomicU32::new(0),
            err,
        };
        RemoteSynthesizer::with_transport(cfg(), t).unwrap()
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = RemoteDiffusionConfig::default();
        assert_eq!((c.upscale_steps, c.bootstrap_steps, c.seed), (15, 1, 22));
        assert_eq!(c.upscale_guidance, 1.0);
        assert_eq!(c.upscale_prompt, "sharp, detailed, denoise, 8k");
        assert_eq!(c.max_in_flight, 4);
        assert!(RemoteDiffusionConfig { endpoint: " ".into(), ..c }.validate().is_err());
    }

    #[test]
    fn retries_then_succeeds() {
        let s = flaky(2, TransportError::Unreachable("down".into()));
        let req = SynthesizerRequest::upscale(QuantImage::filled(3, 2, [9; 3]), 2, 1);
        let out = s.synthesize(&req).unwrap();
        assert_eq!((out.width, out.height), (6, 4));
        assert_eq!(s.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_are_unavailable() {
        let s = flaky(10, TransportError::Unreachable("down".into()));
        let req = SynthesizerRequest::upscale(QuantImage::filled(3, 2, [9; 3]), 2, 1);
        assert!(matches!(s.synthesize(&req), Err(Error::SynthesisUnavailable(_))));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let s = flaky(10, TransportError::Status(400));
        let req = SynthesizerRequest::upscale(QuantImage::filled(3, 2, [9; 3]), 2, 1);
        assert!(matches!(s.synthesize(&req), Err(Error::Protocol(_))));
        assert_eq!(s.transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn wrong_size_is_protocol_error() {
        let s = flaky(0, TransportError::Status(500));
        let req = SynthesizerRequest::upscale(QuantImage::filled(3, 2, [9; 3]), 4, 1);
        assert!(matches!(s.synthesize(&req), Err(Error::Protocol(_))));
    }

    #[test]
    fn request_body_is_stable() {
        let req = SynthesizerRequest::regenerate(QuantImage::filled(2, 2, [1; 3]), 5);
        let a = RemoteSynthesizer::<Flaky>::request_body(&req).unwrap();
        let b = RemoteSynthesizer::<Flaky>::request_body(&req).unwrap();
        assert_eq!(request_hash(&a), request_hash(&b));
        let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
        assert_eq!(v["mode"], "regenerate");
        assert_eq!(v["steps"], 1);
        assert_eq!(request_hash(b"abc").len(), 64);
    }
}
