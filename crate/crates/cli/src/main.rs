//! `splatforge` command line.
//!
//! Exit codes: 0 success, 1 bad input (flags, configs, files that do not
//! parse), 2 runtime failure. `verify` exits 2 when any check fails.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splatforge::camera_ops::zoom_in_camera;
use splatforge::image::{dequantize, quantize};
use splatforge::io::{self, ply};
use splatforge::metrics::{evaluate, mean_report, MetricReport};
use splatforge::raster::{render, FilterSpec};
use splatforge::scene::validate_scene;
use splatforge::synth::{camera_rig, random_scene, RigSpec, SceneSpec};
use splatforge::trainer::{Dataset, TrainConfig, Trainer};
use splatforge::verify::{reports_json, run_suite, Suite, VerifyOptions};
use splatforge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "splatforge", version, about = "Gaussian splatting with zoom-in pseudo-ground-truth supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a random Gaussian scene and a ring of cameras with their renders.
    SynthScene {
        #[arg(long, default_value_t = 200)]
        gaussians: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        bounds: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        cameras: usize,
        /// Receives cam_XXX.json and the matching cam_XXX.png renders.
        #[arg(long)]
        cam_out: Option<PathBuf>,
    },
    /// Train from a TOML config; writes scene.ply, its state sidecar and log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint PLY written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one view to PNG.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        zoom: f64,
        /// `dilation[,cull_sigma[,min_footprint]]`
        #[arg(long)]
        filter: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the empirical checks and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// PSNR and SSIM of a scene against ground-truth views.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        /// Directory with cam_XXX.png images matching the cameras.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        zoom: f64,
        /// Ground-truth scene; zoomed views are compared against its renders.
        #[arg(long)]
        gt_scene: Option<PathBuf>,
        /// CSV with one row per view and a mean row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::SynthScene {
            gaussians,
            seed,
            bounds,
            out,
            cameras,
            cam_out,
        } => synth_scene(gaussians, seed, bounds, &out, cameras, cam_out.as_deref()),
        Command::Train { config, out, resume } => train(&config, &out, resume.as_deref()),
        Command::Render {
            scene,
            camera,
            zoom,
            filter,
            out,
        } => render_view(&scene, &camera, zoom, filter.as_deref(), &out),
        Command::Verify { suite, report } => verify(&suite, report.as_deref()),
        Command::Eval {
            scene,
            cameras,
            gt,
            zoom,
            gt_scene,
            out,
        } => eval(&scene, &cameras, &gt, zoom, gt_scene.as_deref(), out.as_deref()),
    }
    .map(|_| ExitCode::SUCCESS)
    .or_else(|e| match e {
        Failed => Ok(ExitCode::from(2)),
        Other(e) => Err(e),
    })
}

/// A command that ran to completion but whose outcome is a failure.
enum Outcome {
    Failed,
    Other(Error),
}
use Outcome::{Failed, Other};

impl From<Error> for Outcome {
    fn from(e: Error) -> Self {
        Other(e)
    }
}

type CmdResult = std::result::Result<(), Outcome>;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn synth_scene(n: usize, seed: u64, bounds: f64, out: &Path, k: usize, cam_out: Option<&Path>) -> CmdResult {
    if n == 0 {
        return Err(Error::invalid("--gaussians must be >= 1").into());
    }
    if k == 0 {
        return Err(Error::invalid("--cameras must be >= 1").into());
    }
    let scene = random_scene(&SceneSpec {
        gaussians: n,
        seed,
        bounds,
        ..Default::default()
    })?;
    ply::write(out, &scene)?;
    if let Some(dir) = cam_out {
        let rig = camera_rig(&RigSpec {
            cameras: k,
            radius: 4.0 * bounds,
            ..Default::default()
        })?;
        create_dir(dir)?;
        for (i, cam) in rig.iter().enumerate() {
            io::write_camera(&io::camera_file(dir, i), cam)?;
            let img = quantize(&render(&scene, cam, &FilterSpec::default())?.image)?;
            io::write_image(&io::image_file(dir, i), &img)?;
        }
    }
    Ok(())
}

fn train(config: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = TrainConfig::load(config)?;
    cfg.validate()?;
    let data = Dataset::load(&cfg.dataset)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(cfg, data, ckpt)?,
        None => Trainer::new(cfg, data)?,
    };
    create_dir(out)?;
    trainer.dump_dir = Some(out.to_path_buf());
    log::info!("training from iteration {} to {}", trainer.state.iteration, trainer.total_iters());
    let result = trainer.run(None);
    // keep whatever progress was made, even on failure
    trainer.save_checkpoint(&out.join("scene.ply"))?;
    let log = out.join("log.csv");
    fs::write(&log, trainer.log_csv()).map_err(|e| Error::io(&log, e))?;
    result?;
    Ok(())
}

fn filter_spec(text: Option<&str>) -> Result<FilterSpec> {
    text.map_or_else(|| Ok(FilterSpec::default()), FilterSpec::parse)
}

fn render_view(scene: &Path, camera: &Path, zoom: f64, filter: Option<&str>, out: &Path) -> CmdResult {
    let scene = ply::read(scene)?;
    let cam = zoom_in_camera(&io::read_camera(camera)?, zoom)?;
    let img = quantize(&render(&scene, &cam, &filter_spec(filter)?)?.image)?;
    io::write_image(out, &img)?;
    Ok(())
}

fn verify(suite: &str, report: Option<&Path>) -> CmdResult {
    let suite: Suite = suite.parse()?;
    let reports = run_suite(suite, &VerifyOptions::default())?;
    let text = reports_json(&reports)?;
    println!("{text}");
    if let Some(path) = report {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        for r in reports.iter().filter(|r| !r.pass) {
            eprintln!("FAIL {}: {} (bound {})", r.check, r.value, r.bound);
        }
        Err(Failed)
    }
}

fn eval(scene: &Path, cameras: &Path, gt: &Path, zoom: f64, gt_scene: Option<&Path>, out: Option<&Path>) -> CmdResult {
    let scene = ply::read(scene)?;
    let files = io::list_cameras(cameras)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no cam_XXX.json files in {}", cameras.display())).into());
    }
    let reference = gt_scene.map(ply::read).transpose()?;
    if zoom != 1.0 && reference.is_none() {
        return Err(Error::invalid("--zoom other than 1 needs --gt-scene to render the references").into());
    }
    if let Some(r) = &reference {
        let problems = validate_scene(r);
        if !problems.is_empty() {
            return Err(Error::invalid(format!("ground-truth scene is invalid: {problems:?}")).into());
        }
    }
    if reference.is_none() {
        let images = fs::read_dir(gt)
            .map_err(|e| Error::io(gt, e))?
            .filter_map(|e| e.ok())
            .filter(|e| {
                let name = e.file_name();
                let name = name.to_string_lossy();
                name.starts_with("cam_") && name.ends_with(".png")
            })
            .count();
        if images != files.len() {
            return Err(Error::invalid(format!("{} cameras but {images} ground-truth images", files.len())).into());
        }
    }
    let f = FilterSpec::default();
    let mut rows: Vec<(String, MetricReport)> = Vec::with_capacity(files.len());
    for file in &files {
        let cam = zoom_in_camera(&io::read_camera(file)?, zoom)?;
        let target = match &reference {
            Some(r) => quantize(&render(r, &cam, &f)?.image)?,
            None => {
                let path = gt.join(file.with_extension("png").file_name().expect("listed files have names"));
                if !path.is_file() {
                    return Err(Error::invalid(format!(
                        "{} cameras but no ground truth {}",
                        files.len(),
                        path.display()
                    ))
                    .into());
                }
                io::read_image(&path)?
            }
        };
        let ours = quantize(&render(&scene, &cam, &f)?.image)?;
        let name = file.file_stem().and_then(|s| s.to_str()).unwrap_or("?").to_string();
        rows.push((name, evaluate(&dequantize(&ours), &dequantize(&target))?));
    }
    let mean = mean_report(&rows.iter().map(|r| r.1).collect::<Vec<_>>()).expect("at least one view");
    let mut table = String::from("view,psnr,ssim\n");
    for (name, r) in &rows {
        let _ = writeln!(table, "{name},{:.4},{:.6}", r.psnr, r.ssim);
    }
    let _ = writeln!(table, "mean,{:.4},{:.6}", mean.psnr, mean.ssim);
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
