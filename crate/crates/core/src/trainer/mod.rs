//! The optimization loop.

pub mod densify;
pub mod loss;
pub mod optim;
pub mod pseudo;
pub mod schedule;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use densify::{densify_and_prune, DensifyOutcome, DensifySpec, DensifyStats};
pub use loss::{l1, loss_bootstrap, loss_hybrid, loss_original, loss_upscale, LossConfig, LossWeights};
pub use optim::{Adam, LearningRates};
pub use pseudo::{refresh_bootstrap, refresh_upscale, BackendConfig, CacheEntry, PseudoGtCache, PseudoGtConfig, RefreshContext};
pub use schedule::{phase_of, Phase, Schedule};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{dequantize, FloatImage, QuantImage};
use crate::io;
use crate::metrics::{evaluate, mean_report};
use crate::pseudo_gt::Synthesizer;
use crate::raster::{render, render_backward, smoothing_clamp_3d, FilterSpec, GaussianGrads};
use crate::rng::{domain, mix, substream};
use crate::scene::{validate_scene, Gaussian, Scene, Vec3};

/// Where the initial Gaussians come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Point cloud (PLY) whose positions and colors seed the scene. Without
    /// one, points are drawn uniformly in a cube of half-size `bounds`.
    pub points: Option<PathBuf>,
    pub bounds: f64,
    /// Number of points when sampling randomly, or an upper limit when
    /// reading a point cloud.
    pub count: usize,
    /// Gaussian position noise, world units.
    pub jitter: f64,
    pub opacity: f64,
    /// Fixed color; otherwise taken from the point cloud or gray.
    pub color: Option<[f64; 3]>,
    /// Fixed isotropic scale; otherwise the mean distance to the three
    /// nearest neighbours.
    pub scale: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            points: None,
            bounds: 1.0,
            count: 1000,
            jitter: 0.0,
            opacity: 0.1,
            color: None,
            scale: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Directory of `cam_XXX.json` / `cam_XXX.png` pairs.
    pub dataset: PathBuf,
    pub background: [f64; 3],
    /// Rows are logged (with PSNR/SSIM over all training views) this often.
    pub log_every: u64,
    /// Stop early after this iteration; the schedule still uses its full length.
    pub stop_after: Option<u64>,
    /// 3D smoothing strength applied after each densification; 0 disables.
    pub smoothing_3d: f64,
    pub init: InitConfig,
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub lr: LearningRates,
    pub densify: DensifySpec,
    pub filter: FilterSpec,
    pub pseudo_gt: PseudoGtConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: PathBuf::from("dataset"),
            background: [0.0; 3],
            log_every: 100,
            stop_after: None,
            smoothing_3d: 0.0,
            init: InitConfig::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            lr: LearningRates::default(),
            densify: DensifySpec::default(),
            filter: FilterSpec::default(),
            pseudo_gt: PseudoGtConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            what: "training config".into(),
            offset: e.span().map_or(0, |s| s.start),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if let Some(p) = &cfg.init.points {
            if p.is_relative() {
                cfg.init.points = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// All problems at once; the dataset is not touched.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.schedule.problems());
        out.extend(self.loss.problems());
        out.extend(self.lr.problems());
        out.extend(self.densify.problems());
        out.extend(self.pseudo_gt.problems());
        if let Err(e) = self.filter.validate() {
            out.push(format!("filter: {e}"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            out.push(format!("background {:?} outside [0, 1]", self.background));
        }
        if self.log_every == 0 {
            out.push("log_every must be >= 1".into());
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            out.push("init.opacity must be in (0, 1)".into());
        }
        if self.init.count == 0 {
            out.push("init.count must be >= 1".into());
        }
        if !(self.init.jitter >= 0.0) || !(self.init.bounds > 0.0) {
            out.push("init.jitter must be >= 0 and init.bounds > 0".into());
        }
        if self.init.scale.is_some_and(|s| !(s > 0.0)) {
            out.push("init.scale must be > 0".into());
        }
        if !(self.smoothing_3d >= 0.0) {
            out.push("smoothing_3d must be >= 0".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Training views with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub images: Vec<QuantImage>,
    pub float: Vec<FloatImage>,
}

impl Dataset {
    pub fn new(cameras: Vec<Camera>, images: Vec<QuantImage>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("dataset has no cameras"));
        }
        if cameras.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} cameras but {} images",
                cameras.len(),
                images.len()
            )));
        }
        for (i, (c, img)) in cameras.iter().zip(&images).enumerate() {
            c.validate()?;
            if (c.width, c.height) != (img.width, img.height) {
                return Err(Error::invalid(format!(
                    "view {i}: camera is {}x{}, image {}x{}",
                    c.width, c.height, img.width, img.height
                )));
            }
        }
        let float = images.iter().map(dequantize).collect();
        Ok(Self { cameras, images, float })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::invalid(format!("dataset directory {} does not exist", dir.display())));
        }
        let files = io::list_cameras(dir)?;
        let mut cameras = Vec::with_capacity(files.len());
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = f.with_extension("png");
            if !img.is_file() {
                return Err(Error::invalid(format!("missing image {}", img.display())));
            }
            cameras.push(io::read_camera(&f)?);
            images.push(io::read_image(&img)?);
        }
        Self::new(cameras, images)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// 1.1 times the largest camera distance from the mean camera center.
    pub fn extent(&self) -> f64 {
        let n = self.cameras.len() as f64;
        let center = self.cameras.iter().fold(Vec3::zeros(), |a, c| a + c.position) / n;
        let r = self
            .cameras
            .iter()
            .map(|c| (c.position - center).norm())
            .fold(0.0, f64::max);
        1.1 * r.max(1e-6)
    }
}

fn knn_scale(points: &[Vec3], i: usize) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, p)| (p - points[i]).norm_squared())
        .collect();
    if d.is_empty() {
        return 0.01;
    }
    let k = d.len().min(3);
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let mean = d[..k].iter().map(|v| v.sqrt()).sum::<f64>() / k as f64;
    mean.max(1e-7)
}

pub fn initial_scene(cfg: &TrainConfig) -> Result<Scene> {
    let init = &cfg.init;
    let mut rng = substream(cfg.seed, domain::INIT, 0);
    let (mut points, colors): (Vec<Vec3>, Vec<Vec3>) = match &init.points {
        Some(path) => {
            let cloud = io::ply::read(path)?;
            let mut pts: Vec<(Vec3, Vec3)> = cloud.gaussians.iter().map(|g| (g.position, g.color)).collect();
            if pts.len() > init.count {
                pts.shuffle(&mut rng);
                pts.truncate(init.count);
            }
            pts.into_iter().unzip()
        }
        None => (0..init.count)
            .map(|_| {
                let b = init.bounds;
                let p = Vec3::new(rng.random_range(-b..=b), rng.random_range(-b..=b), rng.random_range(-b..=b));
                (p, Vec3::repeat(0.5))
            })
            .unzip(),
    };
    if points.is_empty() {
        return Err(Error::invalid("initial point cloud is empty"));
    }
    if init.jitter > 0.0 {
        for p in &mut points {
            let n: [f64; 3] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
            *p += Vec3::from(n) * init.jitter;
        }
    }
    let gaussians = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = init.scale.unwrap_or_else(|| knn_scale(&points, i));
            let color = init.color.map_or(colors[i], Vec3::from).map(|c| c.clamp(0.0, 1.0));
            Gaussian::new(*p, Vec3::repeat(s), [1.0, 0.0, 0.0, 0.0], init.opacity, color)
        })
        .collect();
    Ok(Scene::new(gaussians, Vec3::from(cfg.background)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub loss_o: f64,
    pub loss_b: f64,
    pub loss_u: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_gaussians: usize,
}

pub const LOG_HEADER: &str = "iter,loss_o,loss_b,loss_u,psnr,ssim,n_gaussians";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.loss_o, r.loss_b, r.loss_u, r.psnr, r.ssim, r.n_gaussians
        ));
    }
    out
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next iteration to run.
    pub iteration: u64,
    pub scene: Scene,
    pub adam: Adam,
    pub stats: DensifyStats,
    pub cache: PseudoGtCache,
    pub log: Vec<LogRow>,
}

/// Per-step loss breakdown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub camera: usize,
    pub phase: Phase,
    pub loss_o: f64,
    pub loss_b: f64,
    pub loss_u: f64,
    pub loss: f64,
    pub n_gaussians: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub data: Dataset,
    pub state: TrainState,
    backend: Box<dyn Synthesizer>,
    extent: f64,
    /// Receives a JSON dump of the state when a step goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

fn grads_finite(g: &GaussianGrads) -> bool {
    g.position.iter().chain(&g.log_scale).chain(&g.color).all(|v| v.iter().all(|x| x.is_finite()))
        && g.opacity_logit.iter().all(|v| v.is_finite())
        && g.rotation.iter().all(|q| q.iter().all(|x| x.is_finite()))
}

fn sidecar(ply: &Path) -> PathBuf {
    let mut s = ply.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

impl Trainer {
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let scene = initial_scene(&config)?;
        Self::with_scene(config, data, scene)
    }

    pub fn with_scene(config: TrainConfig, data: Dataset, scene: Scene) -> Result<Self> {
        config.validate()?;
        if scene.is_empty() {
            return Err(Error::invalid("initial scene is empty"));
        }
        if scene.len() > config.densify.max_gaussians {
            return Err(Error::Config(format!(
                "initial scene has {} Gaussians, above densify.max_gaussians {}",
                scene.len(),
                config.densify.max_gaussians
            )));
        }
        let n = scene.len();
        let state = TrainState {
            iteration: 0,
            scene,
            adam: Adam::new(n),
            stats: DensifyStats::new(n),
            cache: PseudoGtCache::default(),
            log: Vec::new(),
        };
        Self::from_state(config, data, state)
    }

    pub fn from_state(config: TrainConfig, data: Dataset, state: TrainState) -> Result<Self> {
        config.validate()?;
        let n = state.scene.len();
        if state.adam.len() != n || state.stats.accum.len() != n {
            return Err(Error::invalid("checkpoint state does not match its scene"));
        }
        let backend = config.pseudo_gt.backend.build()?;
        let extent = data.extent();
        Ok(Self {
            config,
            data,
            state,
            backend,
            extent,
            dump_dir: None,
        })
    }

    /// Swaps in a different synthesizer, e.g. a recording or replaying client.
    pub fn with_backend(mut self, backend: Box<dyn Synthesizer>) -> Self {
        self.backend = backend;
        self
    }

    pub fn resume(config: TrainConfig, data: Dataset, checkpoint: &Path) -> Result<Self> {
        let path = sidecar(checkpoint);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_str(&text)?;
        Self::from_state(config, data, state)
    }

    /// Writes the scene PLY and its `.state.json` sidecar.
    pub fn save_checkpoint(&self, ply: &Path) -> Result<()> {
        io::ply::write(ply, &self.state.scene)?;
        let path = sidecar(ply);
        let text = serde_json::to_string(&self.state)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn scene(&self) -> &Scene {
        &self.state.scene
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn total_iters(&self) -> u64 {
        self.config.schedule.scaled().total_iters
    }

    /// Training view for `iter`: a fresh shuffle of all views every epoch.
    pub fn camera_for(&self, iter: u64) -> usize {
        let n = self.data.len() as u64;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut substream(self.config.seed, domain::EPOCH_SHUFFLE, iter / n));
        order[(iter % n) as usize]
    }

    fn refresh(&mut self, iter: u64) -> Result<()> {
        let s = self.config.schedule.scaled();
        let want_up = self.config.loss.upscale && s.up.is_refresh(iter);
        let want_boot = self.config.loss.bootstrap && s.boot.is_refresh(iter);
        if !want_up && !want_boot {
            return Ok(());
        }
        let ctx = RefreshContext {
            cameras: &self.data.cameras,
            images: &self.data.images,
            filter: &self.config.filter,
            config: &self.config.pseudo_gt,
            seed: self.config.seed,
            epoch: 0,
        };
        if want_up {
            let ctx = RefreshContext {
                epoch: s.up.period(iter),
                ..ctx
            };
            let entries = refresh_upscale(&self.state.scene, &ctx, &self.state.cache.upscale, self.backend.as_ref())?;
            self.state.cache.upscale = entries;
        }
        if want_boot {
            let ctx = RefreshContext {
                epoch: s.boot.period(iter),
                cameras: &self.data.cameras,
                images: &self.data.images,
                filter: &self.config.filter,
                config: &self.config.pseudo_gt,
                seed: self.config.seed,
            };
            let periods = s.boot.periods();
            let progress = if periods > 1 {
                s.boot.period(iter) as f64 / (periods - 1) as f64
            } else {
                0.0
            };
            let entries = refresh_bootstrap(
                &self.state.scene,
                &ctx,
                &self.state.cache.bootstrap,
                self.backend.as_ref(),
                progress,
            )?;
            self.state.cache.bootstrap = entries;
        }
        Ok(())
    }

    /// Mean L1 over `entries`, scaled by `lambda`; gradients are accumulated
    /// into `grads`.
    fn pair_term(&self, entries: &[&CacheEntry], lambda: f64, grads: &mut GaussianGrads) -> Result<f64> {
        let mut total = 0.0;
        let scale = lambda / entries.len() as f64;
        for e in entries {
            let r = render(&self.state.scene, &e.view, &self.config.filter)?;
            let (l, mut g) = l1(&r.image, &dequantize(&e.target))?;
            total += l;
            g.data.iter_mut().for_each(|v| *v *= scale);
            grads.accumulate(&render_backward(&self.state.scene, &e.view, &self.config.filter, &g)?);
        }
        Ok(total * scale)
    }

    fn nonfinite(&self, report: &StepReport, what: &str) -> Error {
        let mut msg = format!(
            "iteration {} camera {} phase {:?}: {what} (loss_o {} loss_b {} loss_u {})",
            report.iter, report.camera, report.phase, report.loss_o, report.loss_b, report.loss_u
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join(format!("nonfinite_{:06}.json", report.iter));
            match serde_json::to_string(&self.state) {
                Ok(text) if std::fs::write(&path, &text).is_ok() => {
                    msg.push_str(&format!("; state dumped to {}", path.display()));
                }
                _ => msg.push_str("; state dump failed"),
            }
        }
        Error::NonFinite(msg)
    }

    pub fn evaluate_views(&self) -> Result<(f64, f64)> {
        let mut reports = Vec::with_capacity(self.data.len());
        for (cam, gt) in self.data.cameras.iter().zip(&self.data.float) {
            let r = render(&self.state.scene, cam, &self.config.filter)?;
            reports.push(evaluate(&r.image, gt)?);
        }
        let m = mean_report(&reports).ok_or_else(|| Error::invalid("no views"))?;
        Ok((m.psnr, m.ssim))
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let iter = self.state.iteration;
        self.refresh(iter)?;
        let phase = phase_of(iter, &self.config.schedule);
        let w = self.config.loss.weights_at(iter, &self.config.schedule);
        w.validate()?;
        let ci = self.camera_for(iter);
        let cam = &self.data.cameras[ci];
        let n = self.state.scene.len();

        let primary = render(&self.state.scene, cam, &self.config.filter)?;
        let (loss_o, mut g) = loss_original(&primary.image, &self.data.float[ci], w.lambda_dssim)?;
        let mut report = StepReport {
            iter,
            camera: ci,
            phase,
            loss_o,
            loss_b: 0.0,
            loss_u: 0.0,
            loss: f64::NAN,
            n_gaussians: n,
        };
        if !loss_o.is_finite() || g.data.iter().any(|v| !v.is_finite()) {
            return Err(self.nonfinite(&report, "non-finite original loss"));
        }
        let coef = w.original_coefficient();
        if coef != 1.0 {
            g.data.iter_mut().for_each(|v| *v *= coef);
        }
        let main = render_backward(&self.state.scene, cam, &self.config.filter, &g)?;
        let visible: Vec<bool> = (0..n).map(|i| primary.visible(i)).collect();
        let mut grads = main.clone();

        let mut loss_b = 0.0;
        if w.lambda_boot > 0.0 {
            let entries: Vec<&CacheEntry> = self.state.cache.bootstrap_for(ci).collect();
            if !entries.is_empty() {
                loss_b = self.pair_term(&entries, w.lambda_boot, &mut grads)?;
            }
        }
        let mut loss_u = 0.0;
        if w.lambda_up > 0.0 {
            let entries: Vec<&CacheEntry> = self.state.cache.upscale_for(ci).collect();
            if !entries.is_empty() {
                loss_u = self.pair_term(&entries, w.lambda_up, &mut grads)?;
            }
        }
        report.loss_b = loss_b;
        report.loss_u = loss_u;
        report.loss = loss_hybrid(loss_o, loss_b, loss_u, &w)?;
        let loss = report.loss;
        if !loss.is_finite() {
            return Err(self.nonfinite(&report, "non-finite hybrid loss"));
        }
        if !grads_finite(&grads) {
            return Err(self.nonfinite(&report, "non-finite gradients"));
        }

        let s = self.config.schedule.scaled();
        let densifying = iter < s.densify.end;
        if densifying {
            self.state.stats.add(&main, &visible, cam.width, cam.height);
        }
        let pos_lr = self.config.lr.position_at(iter, s.position_lr_steps, self.extent);
        self.state
            .adam
            .update(&mut self.state.scene, &grads, &self.config.lr, pos_lr)?;

        let d = s.densify;
        if densifying && iter > d.start && (iter - d.start).is_multiple_of(d.interval) {
            let out = densify_and_prune(
                &self.state.scene,
                &self.state.stats,
                &self.config.densify,
                self.extent,
                mix(&[self.config.seed, iter]),
            );
            if out.scene.is_empty() {
                let v = validate_scene(&out.scene);
                return Err(Error::invalid(format!(
                    "iteration {iter}: densification left {}",
                    v.first().map_or("an empty scene".into(), |v| v.message.clone())
                )));
            }
            self.state.adam.remap(&out.origin);
            self.state.scene = out.scene;
            if self.config.smoothing_3d > 0.0 {
                self.state.scene = smoothing_clamp_3d(&self.state.scene, &self.data.cameras, self.config.smoothing_3d);
            }
            self.state.stats = DensifyStats::new(self.state.scene.len());
            log::debug!(
                "iteration {iter}: cloned {} split {} pruned {} -> {}",
                out.cloned,
                out.split,
                out.pruned,
                self.state.scene.len()
            );
        }
        let reset = self.config.densify.opacity_reset_interval;
        if reset > 0 && densifying && iter > 0 && iter.is_multiple_of(reset) {
            densify::reset_opacity(&mut self.state.scene, 0.01);
        }

        report.n_gaussians = self.state.scene.len();
        self.state.iteration = iter + 1;
        if self.state.iteration.is_multiple_of(self.config.log_every) {
            let (psnr, ssim) = self.evaluate_views()?;
            self.state.log.push(LogRow {
                iter: self.state.iteration,
                loss_o,
                loss_b,
                loss_u,
                psnr,
                ssim,
                n_gaussians: report.n_gaussians,
            });
            log::info!("iter {} loss {loss:.5} psnr {psnr:.2} n {}", self.state.iteration, report.n_gaussians);
        }
        Ok(report)
    }

    /// Steps until `until` (exclusive), the configured stop, or the end of
    /// the schedule, whichever comes first.
    pub fn run(&mut self, until: Option<u64>) -> Result<()> {
        let mut end = self.total_iters();
        if let Some(s) = self.config.stop_after {
            end = end.min(s);
        }
        if let Some(u) = until {
            end = end.min(u);
        }
        while self.state.iteration < end {
            self.step()?;
        }
        Ok(())
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.state.log)
    }
}
