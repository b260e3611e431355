//! The `hsplat` command-line surface.
//!
//! Exit codes: 0 success, 1 `diff` over tolerance, 2 usage error, 3 i/o
//! error, 4 malformed file, 5 invalid input or refused operation. Errors go
//! to standard error as `error[<category>]: <message>`.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::compositor::{render, OutputMode};
use crate::error::{Error, Result};
use crate::fit::{fit, write_loss_curve, FitConfig};
use crate::io::{
    load_camera, load_scene, load_views, normals_for_display, read_image, save_scene, save_views,
    write_image,
};
use crate::math::Vec3;
use crate::oracle::oracle_pixelwise_trace;
use crate::projection::TileCulling;
use crate::prune::{prune_schedule, write_prune_report, ScheduleConfig};
use crate::raster::{RenderOptions, Renderer};
use crate::synth::{gen_mirror_probe_with, gen_random, mirror_views, Bounds, MirrorProbeConfig};
use crate::trace::Phi;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OVER_TOLERANCE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_INVALID: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "io" => EXIT_IO,
        "format" => EXIT_FORMAT,
        _ => EXIT_INVALID,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hsplat",
    version,
    about = "Hybrid base/reflective 2D Gaussian splatting renderer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ThreadArgs {
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, env = "HSPL_THREADS", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Maxabs,
    Psnr,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render one view to an 8-bit PNG or PPM.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "final")]
        mode: OutputMode,
        #[arg(long, default_value_t = crate::consts::DEFAULT_TILE_SIZE)]
        tile_size: usize,
        #[command(flatten)]
        threads: ThreadArgs,
        #[arg(long, value_enum, default_value_t = OnOff::On)]
        pipelined: OnOff,
    },
    /// Reflection tracing counters as CSV.
    TraceStats {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// Also run the per-pixel tracer and compare against it.
        #[arg(long)]
        compare_pixelwise: bool,
        /// CSV destination; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Score-ranked pruning rounds, measured against renders of the input scene.
    Prune {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        views: PathBuf,
        #[arg(long, default_value_t = 4)]
        rounds: usize,
        #[arg(long, default_value_t = 0.05)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        refit_steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Report CSV; defaults to the output path with a `.csv` extension.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Gradient-descent fit of a scene to target images.
    Fit {
        #[arg(long)]
        scene_init: PathBuf,
        #[arg(long)]
        views: PathBuf,
        /// One sRGB image per view, in view order.
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        lambda_norm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        threads: ThreadArgs,
    },
    /// Wall time of the serial and pipelined kernels with both culling modes.
    Bench {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        threads_list: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two 8-bit images.
    Diff {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Maxabs)]
        metric: Metric,
        /// Exit with status 1 when the max abs difference exceeds this.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Generate synthetic scenes and cameras.
    #[command(subcommand)]
    Gen(GenCommand),
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Random base and reflective Gaussians in a cube.
    Random {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        base: usize,
        #[arg(long, default_value_t = 20)]
        reflective: usize,
        /// Half-width of the cube.
        #[arg(long, default_value_t = 1.0)]
        half: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a camera looking at the cube.
        #[arg(long)]
        camera_out: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
    /// A square mirror with a colored probe above it.
    MirrorProbe {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 0)]
        dust: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_views: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
}

fn renderer(threads: usize, tile_size: usize, pipelined: bool) -> Result<Renderer> {
    Renderer::new(RenderOptions {
        threads,
        tile_size,
        pipelined,
        ..RenderOptions::default()
    })
}

fn open_out<'a>(path: &Option<PathBuf>, stdout: &'a mut dyn Write) -> Result<Box<dyn Write + 'a>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(stdout),
    })
}

fn sibling_csv(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Runs a parsed command, writing normal output to `stdout` and progress
/// to `stderr`. Returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Render {
            scene,
            camera,
            out,
            mode,
            tile_size,
            threads,
            pipelined,
        } => {
            let scene = load_scene(scene)?;
            let view = load_camera(camera)?;
            let r = renderer(threads.threads, tile_size, pipelined == OnOff::On)?;
            let output = render(&r, &scene, &view)?;
            let img = output.image(mode);
            match mode {
                OutputMode::Final | OutputMode::Base | OutputMode::Ref => {
                    write_image(img, &out, true)?
                }
                OutputMode::Beta => write_image(img, &out, false)?,
                OutputMode::Normal => write_image(&normals_for_display(img), &out, false)?,
            }
            writeln!(stderr, "wrote {}", out.display())?;
        }
        Command::TraceStats {
            scene,
            camera,
            compare_pixelwise,
            out,
            threads,
        } => {
            let scene = load_scene(scene)?;
            let view = load_camera(camera)?;
            let r = renderer(threads.threads, crate::consts::DEFAULT_TILE_SIZE, true)?;
            let output = render(&r, &scene, &view)?;
            let s = output.stats;
            let mut pixelwise_rays = view.pixel_count() as u64;
            let mut diff = String::new();
            if compare_pixelwise {
                let pw = r.install(|| oracle_pixelwise_trace(&scene, &view, &Phi::Identity))?;
                pixelwise_rays = pw.rays;
                let mean = pw
                    .image
                    .data
                    .iter()
                    .zip(&output.ref_color.data)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / pw.image.data.len().max(1) as f64;
                diff = format!("{mean:.6e}");
            }
            let ratio = s.rays_traced as f64 / pixelwise_rays.max(1) as f64;
            let mut w = csv::Writer::from_writer(open_out(&out, stdout)?);
            w.write_record([
                "rays_traced",
                "bvh_nodes_visited",
                "hits_blended",
                "reflective_total",
                "pixelwise_rays",
                "ray_ratio",
                "pixelwise_mean_abs_diff",
            ])?;
            w.write_record([
                s.rays_traced.to_string(),
                s.bvh_nodes_visited.to_string(),
                s.hits_blended.to_string(),
                scene.reflective.len().to_string(),
                pixelwise_rays.to_string(),
                ratio.to_string(),
                diff,
            ])?;
            w.flush()?;
        }
        Command::Prune {
            scene,
            views,
            rounds,
            ratio,
            refit_steps,
            out,
            report,
            threads,
        } => {
            let scene = load_scene(scene)?;
            let views = load_views(views)?;
            let r = renderer(threads.threads, crate::consts::DEFAULT_TILE_SIZE, true)?;
            let targets = views
                .iter()
                .map(|v| render(&r, &scene, v).map(|o| o.final_color))
                .collect::<Result<Vec<_>>>()?;
            let mut cfg = ScheduleConfig {
                rounds,
                ratio,
                ..ScheduleConfig::default()
            };
            cfg.refit.iterations = refit_steps;
            let (pruned, log) = prune_schedule(&r, &scene, &views, &targets, &cfg)?;
            save_scene(&pruned, &out)?;
            let report = report.unwrap_or_else(|| sibling_csv(&out));
            write_prune_report(&log, File::create(&report)?)?;
            for rec in &log {
                writeln!(
                    stderr,
                    "round {}: {} base + {} reflective remain, psnr {:.3} dB",
                    rec.round, rec.remaining_base, rec.remaining_reflective, rec.psnr
                )?;
            }
        }
        Command::Fit {
            scene_init,
            views,
            targets,
            iters,
            out,
            loss_csv,
            lambda_norm,
            seed,
            threads,
        } => {
            let scene = load_scene(scene_init)?;
            let views = load_views(views)?;
            let targets = targets
                .iter()
                .map(|p| read_image(p, true))
                .collect::<Result<Vec<_>>>()?;
            let r = renderer(threads.threads, crate::consts::DEFAULT_TILE_SIZE, true)?;
            let cfg = FitConfig {
                iterations: iters,
                lambda_norm,
                seed,
                ..FitConfig::default()
            };
            let result = fit(&r, &scene, &views, &targets, &cfg)?;
            save_scene(&result.scene, &out)?;
            let csv_path = loss_csv.unwrap_or_else(|| sibling_csv(&out));
            write_loss_curve(&result.curve, File::create(&csv_path)?)?;
            if let (Some(first), Some(last)) = (result.curve.first(), result.curve.last()) {
                writeln!(stderr, "loss {:.6} -> {:.6}", first.loss, last.loss)?;
            }
        }
        Command::Bench {
            scene,
            camera,
            repeat,
            threads_list,
            out,
        } => {
            if repeat == 0 {
                return Err(Error::InvalidArgument("--repeat must be positive".into()));
            }
            let scene = load_scene(scene)?;
            let view = load_camera(camera)?;
            let mut w = csv::Writer::from_writer(open_out(&out, stdout)?);
            w.write_record([
                "kernel", "culling", "threads", "repeat", "mean_ms", "min_ms",
            ])?;
            for &threads in &threads_list {
                for (kernel, pipelined) in [("serial", false), ("pipelined", true)] {
                    for (cname, culling) in [
                        ("naive", TileCulling::NaiveRect),
                        ("precise", TileCulling::Precise),
                    ] {
                        let r = Renderer::new(RenderOptions {
                            threads,
                            pipelined,
                            culling,
                            ..RenderOptions::default()
                        })?;
                        render(&r, &scene, &view)?;
                        let mut times = Vec::with_capacity(repeat);
                        for _ in 0..repeat {
                            let t0 = Instant::now();
                            render(&r, &scene, &view)?;
                            times.push(t0.elapsed().as_secs_f64() * 1e3);
                        }
                        let mean = times.iter().sum::<f64>() / repeat as f64;
                        let min = times.iter().copied().fold(f64::INFINITY, f64::min);
                        w.write_record([
                            kernel.to_string(),
                            cname.to_string(),
                            threads.to_string(),
                            repeat.to_string(),
                            format!("{mean:.3}"),
                            format!("{min:.3}"),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        Command::Diff { a, b, metric, tol } => {
            let ia = read_image(a, false)?;
            let ib = read_image(b, false)?;
            let maxabs = ia.max_abs_diff(&ib)?;
            match metric {
                Metric::Maxabs => writeln!(stdout, "{maxabs}")?,
                Metric::Psnr => writeln!(stdout, "{}", ia.psnr(&ib)?)?,
            }
            if tol.is_some_and(|t| maxabs > t) {
                return Ok(EXIT_OVER_TOLERANCE);
            }
        }
        Command::Gen(GenCommand::Random {
            seed,
            base,
            reflective,
            half,
            out,
            camera_out,
            width,
            height,
        }) => {
            if !(half > 0.0) {
                return Err(Error::InvalidArgument("--half must be positive".into()));
            }
            let bounds = Bounds::cube(half);
            save_scene(&gen_random(seed, base, reflective, &bounds), &out)?;
            if let Some(p) = camera_out {
                save_views(&[crate::synth::default_view(&bounds, width, height)], p)?;
            }
        }
        Command::Gen(GenCommand::MirrorProbe {
            seed,
            extent,
            dust,
            out,
            views_out,
            n_views,
            width,
            height,
        }) => {
            let cfg = MirrorProbeConfig {
                extent,
                dust,
                probe_offset: Vec3::new(0.0, 0.25, 0.5),
                ..MirrorProbeConfig::default()
            };
            let (scene, desc) = gen_mirror_probe_with(seed, &cfg);
            save_scene(&scene, &out)?;
            if let Some(p) = views_out {
                save_views(&mirror_views(&desc, n_views, width, height)?, p)?;
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args`, runs the command and reports errors; returns the exit code.
pub fn main_with(
    args: impl IntoIterator<Item = String>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(stdout, "{}", e.render());
            return EXIT_OK;
        }
    };
    match run(cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error[{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}
