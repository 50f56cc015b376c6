//! Empirical checks behind `splatforge verify`. Each check returns one or
//! more [`CheckReport`] lines; a suite passes when every line does.

use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::camera::Camera;
use crate::camera_ops::zoom_in_camera;
use crate::error::{Error, Result};
use crate::image::{max_abs_diff_u8, quantize, FloatImage, QuantImage};
use crate::pseudo_gt::{synthesize, SynthesizerRequest, SyntheticBackend};
use crate::raster::{apply_filter, project_gaussian, render, render_backward, FilterSpec, GaussianGrads, MAX_ALPHA, MIN_COV_DET, TRANSMITTANCE_EPS};
use crate::resampling::{
    chebyshev_sample_size, concentration_trial, downsample_image, render_interp_consistency, CheckReport,
    FlexibilityThresholds, WeightKernel,
};
use crate::rng::{domain, mix, substream};
use crate::scene::{normalize_quat, Gaussian, Scene, Vec3};
use crate::synth::{random_scene, SceneSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Interp,
    Chebyshev,
    Filter,
    Gradients,
    Consistency,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "interp" => Suite::Interp,
            "chebyshev" => Suite::Chebyshev,
            "filter" => Suite::Filter,
            "gradients" => Suite::Gradients,
            "consistency" => Suite::Consistency,
            "all" => Suite::All,
            _ => {
                return Err(Error::invalid(format!(
                    "unknown suite '{s}' (expected interp, chebyshev, filter, gradients, consistency or all)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Source images per zoom factor in the round-trip check.
    pub images: usize,
    pub trials: u64,
    pub thresholds: FlexibilityThresholds,
    pub chebyshev_sigma: f64,
    pub filter_cases: usize,
    pub gradient_triples: usize,
    pub oracle_scenes: usize,
    pub kernel: WeightKernel,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            images: 100,
            trials: 100_000,
            thresholds: FlexibilityThresholds::default(),
            chebyshev_sigma: 1.0,
            filter_cases: 50,
            gradient_triples: 100,
            oracle_scenes: 200,
            kernel: WeightKernel::default(),
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    Ok(match suite {
        Suite::Interp => check_interp(opts)?,
        Suite::Chebyshev => vec![check_chebyshev(opts)?],
        Suite::Filter => vec![check_filter_two_scale(opts)?],
        Suite::Gradients => vec![check_gradients(opts)?],
        Suite::Consistency => vec![check_render_oracle(opts)?, check_render_interp(opts)?],
        Suite::All => {
            let mut out = Vec::new();
            for s in [Suite::Interp, Suite::Chebyshev, Suite::Filter, Suite::Gradients, Suite::Consistency] {
                out.extend(run_suite(s, opts)?);
            }
            out
        }
    })
}

fn report(check: &str, params: serde_json::Value, value: f64, bound: f64, pass: bool) -> CheckReport {
    CheckReport {
        check: check.into(),
        params,
        value,
        bound,
        pass,
    }
}

fn verify_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    substream(seed, domain::VERIFY, stream)
}

pub fn random_quant_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> QuantImage {
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    QuantImage::from_data(w, h, data).expect("sized buffer")
}

/// Upscale then downsample must return the source exactly; one line per
/// zoom factor, valued by the number of failing images.
pub fn check_interp(opts: &VerifyOptions) -> Result<Vec<CheckReport>> {
    let backend = SyntheticBackend {
        amplitude: opts.thresholds.tau_v,
        kernel: opts.kernel,
        ..Default::default()
    };
    let mut out = Vec::new();
    for a in [2u32, 4, 8] {
        let mut failures = 0usize;
        for i in 0..opts.images {
            let mut rng = verify_rng(opts.seed, mix(&[a as u64, i as u64]));
            let (w, h) = (rng.random_range(1..=12u32), rng.random_range(1..=12u32));
            let src = random_quant_image(&mut rng, w, h);
            let req = SynthesizerRequest::upscale(src.clone(), a, mix(&[opts.seed, i as u64]));
            let up = synthesize(&req, &backend)?;
            if downsample_image(&up, a, &opts.kernel)? != src {
                failures += 1;
            }
        }
        out.push(report(
            "interp_round_trip",
            json!({"a": a, "images": opts.images, "kernel": opts.kernel, "tau_v": opts.thresholds.tau_v}),
            failures as f64,
            0.0,
            failures == 0,
        ));
    }
    Ok(out)
}

pub fn check_chebyshev(opts: &VerifyOptions) -> Result<CheckReport> {
    let th = &opts.thresholds;
    let n_s = chebyshev_sample_size(opts.chebyshev_sigma, th.tau_n, th.tau_p)?;
    // noise with deviation sigma crosses tau_n exactly when standard noise
    // crosses tau_n / sigma
    let rate = concentration_trial(n_s, th.tau_n / opts.chebyshev_sigma, opts.trials, opts.seed)?;
    Ok(report(
        "chebyshev_concentration",
        json!({"sigma": opts.chebyshev_sigma, "tau_n": th.tau_n, "tau_p": th.tau_p, "n_s": n_s, "trials": opts.trials}),
        rate,
        th.tau_p,
        rate <= th.tau_p,
    ))
}

/// A smooth scene: few, large Gaussians.
pub fn smooth_scene(seed: u64) -> Result<Scene> {
    random_scene(&SceneSpec {
        gaussians: 24,
        seed,
        bounds: 0.8,
        scale_range: (0.3, 0.6),
        opacity_range: (0.5, 0.9),
        background: [0.1, 0.1, 0.1],
    })
}

pub fn smooth_camera(seed: u64, size: u32) -> Result<Camera> {
    let mut rng = verify_rng(seed, u64::MAX);
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.5..0.5);
    let eye = Vec3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()) * 4.0;
    Camera::look_at(eye, Vec3::zeros(), Vec3::y(), 0.9, size, size)
}

/// Footprint threshold used by the filter check.
pub const FILTER_MIN_FOOTPRINT: f64 = 0.5;

/// Injects one sub-pixel Gaussian in front of a smooth scene, inside the
/// region a 4x zoom sees, and flips its color. Base renders must stay
/// within 1 unit; the zoomed render must change by at least 10 somewhere.
pub fn check_filter_two_scale(opts: &VerifyOptions) -> Result<CheckReport> {
    let f = FilterSpec {
        min_footprint_px: FILTER_MIN_FOOTPRINT,
        ..FilterSpec::default()
    };
    let size = 64;
    let mut failures = 0usize;
    let mut worst_base = 0u8;
    let mut weakest_zoom = u8::MAX;
    for case in 0..opts.filter_cases {
        let base_scene = smooth_scene(mix(&[opts.seed, case as u64]))?;
        let cam = smooth_camera(mix(&[opts.seed, case as u64]), size)?;
        let zoom = zoom_in_camera(&cam, 4.0)?;
        let mut rng = verify_rng(opts.seed, mix(&[0xf1, case as u64]));
        let lo = size as f64 * 3.0 / 8.0 + 1.0;
        let hi = size as f64 * 5.0 / 8.0 - 1.0;
        let (u, v) = (rng.random_range(lo..hi), rng.random_range(lo..hi));
        let depth = rng.random_range(1.5..2.5);
        let (fx, _) = cam.focal();
        let footprint = rng.random_range(0.2..0.45);
        let s = footprint * depth / fx;
        let pos = cam.position + cam.ray_direction(u, v) * depth;
        let color = Vec3::new(
            if rng.random::<bool>() { 0.05 } else { 0.95 },
            if rng.random::<bool>() { 0.05 } else { 0.95 },
            if rng.random::<bool>() { 0.05 } else { 0.95 },
        );
        let g = Gaussian::new(pos, Vec3::repeat(s), [1.0, 0.0, 0.0, 0.0], 0.95, color);
        let mut flipped = g.clone();
        flipped.color = Vec3::repeat(1.0) - color;

        let with = |g: &Gaussian| {
            let mut sc = base_scene.clone();
            sc.gaussians.push(g.clone());
            sc
        };
        let (a, b) = (with(&g), with(&flipped));
        let q = |sc: &Scene, c: &Camera| -> Result<QuantImage> { quantize(&render(sc, c, &f)?.image) };
        let base = max_abs_diff_u8(&q(&a, &cam)?, &q(&b, &cam)?)?;
        let zoomed = max_abs_diff_u8(&q(&a, &zoom)?, &q(&b, &zoom)?)?;
        worst_base = worst_base.max(base);
        weakest_zoom = weakest_zoom.min(zoomed);
        if base > 1 || zoomed < 10 {
            failures += 1;
        }
    }
    Ok(report(
        "filter_two_scale",
        json!({
            "cases": opts.filter_cases,
            "min_footprint_px": FILTER_MIN_FOOTPRINT,
            "zoom": 4,
            "worst_base_change": worst_base,
            "weakest_zoom_change": weakest_zoom,
        }),
        failures as f64,
        0.0,
        failures == 0,
    ))
}

/// One large Gaussian with a random pose and color, the plainest smooth signal.
pub fn single_smooth_scene(seed: u64) -> Scene {
    let mut rng = verify_rng(seed, mix(&[0x5e, seed]));
    let mut q = [0.0; 4];
    q.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
    let g = Gaussian::new(
        Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
        Vec3::new(rng.random_range(0.4..0.6), rng.random_range(0.4..0.6), rng.random_range(0.4..0.6)),
        normalize_quat(&q).unwrap_or([1.0, 0.0, 0.0, 0.0]),
        rng.random_range(0.6..0.9),
        Vec3::new(rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)),
    );
    Scene::new(vec![g], Vec3::repeat(0.1))
}

/// Views the render and its 2x zoom downsampled, at 64x64, over several
/// single-Gaussian scenes. The 24-Gaussian smooth scene is reported
/// alongside; it is not held to the bound.
pub fn check_render_interp(opts: &VerifyOptions) -> Result<CheckReport> {
    let f = FilterSpec::default();
    let mut worst = 0u8;
    for i in 0..INTERP_SCENES {
        let seed = mix(&[opts.seed, i]);
        let dev = render_interp_consistency(&single_smooth_scene(seed), &smooth_camera(seed, 64)?, 2, &opts.kernel, &f)?;
        worst = worst.max(dev);
    }
    let busy = render_interp_consistency(&smooth_scene(opts.seed)?, &smooth_camera(opts.seed, 64)?, 2, &opts.kernel, &f)?;
    Ok(report(
        "render_interp_consistency",
        json!({"a": 2, "size": 64, "scenes": INTERP_SCENES, "kernel": opts.kernel, "many_gaussian_deviation": busy}),
        worst as f64,
        2.0,
        worst <= 2,
    ))
}

const INTERP_SCENES: u64 = 10;

/// Per-pixel reference renderer: every splat is tested against every pixel
/// and the covering set is sorted for each pixel on its own.
pub fn naive_render(scene: &Scene, cam: &Camera, f: &FilterSpec) -> FloatImage {
    struct S {
        depth: f64,
        index: usize,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
        alpha: f64,
        color: Vec3,
    }
    let mut splats = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        let Some(s) = project_gaussian(g, i, cam, f) else { continue };
        let s = apply_filter(&s, f);
        if s.filtered || s.cov2d.determinant() <= MIN_COV_DET {
            continue;
        }
        let Some(inv) = s.cov2d.try_inverse() else { continue };
        splats.push(S {
            depth: s.depth,
            index: i,
            mean: s.mean2d,
            inv,
            alpha: g.opacity(),
            color: g.color,
        });
    }
    let r2 = f.cull_radius_sigma * f.cull_radius_sigma;
    let floor = (-0.5 * r2).exp();
    let mut img = FloatImage::filled(cam.width, cam.height, [0.0; 3]);
    for py in 0..cam.height {
        for px in 0..cam.width {
            let x = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
            let mut order: Vec<&S> = splats.iter().collect();
            order.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
            let mut t = 1.0;
            let mut c = Vec3::zeros();
            for s in order {
                let d = x - s.mean;
                let q = (d.transpose() * s.inv * d)[(0, 0)];
                if q >= r2 {
                    continue;
                }
                let g = ((-0.5 * q).exp() - floor) / (1.0 - floor);
                if g <= 0.0 {
                    continue;
                }
                let sigma = (s.alpha * g).min(MAX_ALPHA);
                if t * (1.0 - sigma) < TRANSMITTANCE_EPS {
                    break;
                }
                c += s.color * sigma * t;
                t *= 1.0 - sigma;
            }
            c += scene.background * t;
            img.set(px, py, [c.x, c.y, c.z]);
        }
    }
    img
}

pub fn random_camera(rng: &mut ChaCha8Rng, width: u32, height: u32) -> Result<Camera> {
    let dir = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-0.6..0.6),
        rng.random_range(-1.0..1.0),
    );
    let dir = if dir.norm() < 0.2 { Vec3::new(0.0, 0.0, -1.0) } else { dir.normalize() };
    let eye = dir * rng.random_range(3.5..5.0);
    Camera::look_at(eye, Vec3::zeros(), Vec3::y(), rng.random_range(0.6..1.0), width, height)
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, max_opacity: f64) -> Gaussian {
    let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let q = normalize_quat(&q).unwrap_or([1.0, 0.0, 0.0, 0.0]);
    let scale = Vec3::new(
        rng.random_range(0.04..0.4),
        rng.random_range(0.04..0.4),
        rng.random_range(0.04..0.4),
    );
    let pos = Vec3::new(
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    );
    let color = Vec3::new(rng.random(), rng.random(), rng.random());
    Gaussian::new(pos, scale, q, rng.random_range(0.05..max_opacity), color)
}

pub fn random_test_scene(rng: &mut ChaCha8Rng, n: usize, max_opacity: f64) -> Scene {
    let gaussians = (0..n).map(|_| random_gaussian(rng, max_opacity)).collect();
    Scene::new(gaussians, Vec3::new(rng.random(), rng.random(), rng.random()))
}

pub fn random_grad_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> FloatImage {
    let data = (0..(w * h * 3)).map(|_| rng.random_range(-1.0..1.0)).collect();
    FloatImage::from_data(w, h, data).expect("sized buffer")
}

/// Tile renderer against [`naive_render`] on random scenes of up to 64
/// Gaussians and up to 32x32 pixels.
pub fn check_render_oracle(opts: &VerifyOptions) -> Result<CheckReport> {
    let f = FilterSpec::default();
    let mut worst: f64 = 0.0;
    for i in 0..opts.oracle_scenes {
        let mut rng = verify_rng(opts.seed, mix(&[0x0a, i as u64]));
        let n = rng.random_range(1..=64);
        let (w, h) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let scene = random_test_scene(&mut rng, n, 0.99);
        let cam = random_camera(&mut rng, w, h)?;
        let tiled = render(&scene, &cam, &f)?.image;
        let naive = naive_render(&scene, &cam, &f);
        for (a, b) in tiled.data.iter().zip(&naive.data) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(report(
        "render_oracle",
        json!({"scenes": opts.oracle_scenes, "max_gaussians": 64, "max_size": 32}),
        worst,
        1e-6,
        worst <= 1e-6,
    ))
}

/// One scalar parameter of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub gaussian: usize,
    pub group: ParamGroup,
    pub component: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    OpacityLogit,
    Color,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::OpacityLogit,
        ParamGroup::Color,
    ];

    pub fn size(self) -> usize {
        match self {
            ParamGroup::Rotation => 4,
            ParamGroup::OpacityLogit => 1,
            _ => 3,
        }
    }
}

pub fn all_slots(n: usize) -> Vec<Slot> {
    let mut out = Vec::new();
    for gaussian in 0..n {
        for group in ParamGroup::ALL {
            for component in 0..group.size() {
                out.push(Slot {
                    gaussian,
                    group,
                    component,
                });
            }
        }
    }
    out
}

pub fn param_mut(scene: &mut Scene, s: Slot) -> &mut f64 {
    let g = &mut scene.gaussians[s.gaussian];
    match s.group {
        ParamGroup::Position => &mut g.position[s.component],
        ParamGroup::LogScale => &mut g.log_scale[s.component],
        ParamGroup::Rotation => &mut g.rotation[s.component],
        ParamGroup::OpacityLogit => &mut g.opacity_logit,
        ParamGroup::Color => &mut g.color[s.component],
    }
}

pub fn analytic(grads: &GaussianGrads, s: Slot) -> f64 {
    let i = s.gaussian;
    match s.group {
        ParamGroup::Position => grads.position[i][s.component],
        ParamGroup::LogScale => grads.log_scale[i][s.component],
        ParamGroup::Rotation => grads.rotation[i][s.component],
        ParamGroup::OpacityLogit => grads.opacity_logit[i],
        ParamGroup::Color => grads.color[i][s.component],
    }
}

pub fn central_difference(scene: &Scene, s: Slot, h: f64, loss: impl Fn(&Scene) -> f64) -> f64 {
    let mut plus = scene.clone();
    *param_mut(&mut plus, s) += h;
    let mut minus = scene.clone();
    *param_mut(&mut minus, s) -= h;
    (loss(&plus) - loss(&minus)) / (2.0 * h)
}

pub fn grads_agree(a: f64, fd: f64, rel: f64, abs: f64) -> bool {
    (a - fd).abs() <= (rel * a.abs().max(fd.abs())).max(abs)
}

pub fn weighted_sum(img: &FloatImage, weights: &FloatImage) -> f64 {
    img.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    pub failures: usize,
    /// Worst `|analytic - fd| / max(rel * scale, abs)`; at most 1 when all agree.
    pub worst_ratio: f64,
    pub groups_checked: [usize; 5],
    /// Slots where the coarse step straddled a kink but the fine step agreed.
    pub kinks: usize,
}

/// FD step, relative and absolute tolerances.
pub const FD_STEP: f64 = 1e-4;
/// Retry step for slots whose coarse difference disagrees. The kernel's
/// cutoff makes the loss only piecewise smooth, and a coarse step can
/// straddle the crease.
pub const FD_FINE_STEP: f64 = 1e-6;
pub const FD_REL: f64 = 1e-3;
pub const FD_ABS: f64 = 1e-6;

/// Compares every parameter of `scene` for the loss `sum(weights * render)`.
pub fn gradient_check(scene: &Scene, cam: &Camera, weights: &FloatImage, f: &FilterSpec) -> Result<GradientCheck> {
    let grads = render_backward(scene, cam, f, weights)?;
    let loss = |s: &Scene| render(s, cam, f).map(|r| weighted_sum(&r.image, weights)).unwrap_or(f64::NAN);
    let mut out = GradientCheck::default();
    for slot in all_slots(scene.len()) {
        let a = analytic(&grads, slot);
        let mut fd = central_difference(scene, slot, FD_STEP, loss);
        if !grads_agree(a, fd, FD_REL, FD_ABS) {
            let fine = central_difference(scene, slot, FD_FINE_STEP, loss);
            if grads_agree(a, fine, FD_REL, FD_ABS) {
                out.kinks += 1;
            }
            fd = fine;
        }
        out.checked += 1;
        out.groups_checked[ParamGroup::ALL.iter().position(|g| *g == slot.group).unwrap()] += 1;
        let tol = (FD_REL * a.abs().max(fd.abs())).max(FD_ABS);
        out.worst_ratio = out.worst_ratio.max((a - fd).abs() / tol);
        if !grads_agree(a, fd, FD_REL, FD_ABS) {
            out.failures += 1;
        }
    }
    Ok(out)
}

/// Random (scene, camera, weight image) triple for the gradient check.
/// Opacities stay below the clamp and scenes small enough that blending
/// never terminates early.
pub fn gradient_triple(seed: u64, index: u64) -> Result<(Scene, Camera, FloatImage)> {
    let mut rng = verify_rng(seed, mix(&[0x9d, index]));
    let n = rng.random_range(1..=8);
    let size = rng.random_range(8..=20);
    let scene = random_test_scene(&mut rng, n, 0.6);
    let cam = random_camera(&mut rng, size, size)?;
    let w = random_grad_image(&mut rng, size, size);
    Ok((scene, cam, w))
}

pub fn check_gradients(opts: &VerifyOptions) -> Result<CheckReport> {
    let f = FilterSpec::default();
    let mut total = GradientCheck::default();
    for i in 0..opts.gradient_triples {
        let (scene, cam, w) = gradient_triple(opts.seed, i as u64)?;
        let c = gradient_check(&scene, &cam, &w, &f)?;
        total.checked += c.checked;
        total.failures += c.failures;
        total.worst_ratio = total.worst_ratio.max(c.worst_ratio);
        total.kinks += c.kinks;
        for k in 0..5 {
            total.groups_checked[k] += c.groups_checked[k];
        }
    }
    let all_groups = total.groups_checked.iter().all(|n| *n > 0);
    Ok(report(
        "gradients_fd",
        json!({
            "triples": opts.gradient_triples,
            "h": FD_STEP,
            "fine_h": FD_FINE_STEP,
            "kinks": total.kinks,
            "rel": FD_REL,
            "abs": FD_ABS,
            "parameters": total.checked,
            "worst_ratio": total.worst_ratio,
        }),
        total.failures as f64,
        0.0,
        total.failures == 0 && all_groups,
    ))
}

/// Writes `reports` as a JSON array.
pub fn reports_json(reports: &[CheckReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}
