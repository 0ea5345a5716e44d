//! Command-line front end. `run` returns the process exit code: 0 ok, 1 usage,
//! 2 data error, 3 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::composite::render;
use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::image::{write_image, Image};
use crate::metrics::{psnr, ssim};
use crate::scene::{load_camera, load_scene, save_scene, Scene};
use crate::trainer::toy::{bundled, perturb, render_dataset, self_consistency_config, BUNDLED};
use crate::trainer::{log_to_csv, train, TrainConfig};
use crate::verify::{run_suite, VerifyOptions, SUITES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "peelsplat", version, about = "Depth-peeled surfels with sort-free Gaussians")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every random choice; overrides the seed in a training config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a bundled toy scene, a perturbed starting scene, rendered views and a config.
    MakeToy {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(BUNDLED))]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Store views as 8-bit PPM instead of float PFM.
        #[arg(long)]
        ppm: bool,
    },
    /// Optimize a scene against a directory of posed images.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Overrides the iteration count of the config.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render one camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        /// `.pfm` for float output, anything else for 8-bit PPM.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=4))]
        layers: u8,
        /// Also write per-layer depth, alpha and transmittance maps as PFM next to `out`.
        #[arg(long)]
        dump_layers: bool,
    },
    /// PSNR and SSIM of a scene on every view of a dataset.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(2..=4))]
        layers: u8,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
        /// Report wall-clock frame time over 100 renders of the first view.
        #[arg(long)]
        timing: bool,
    },
    /// Run the self-checks.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(["peel", "order", "grad", "leakage", "all"]))]
        suite: String,
        /// Smaller problem sizes for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
    /// Train the ablation grid from one starting scene and compare the results.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
        format: TableFormat,
    },
}

enum Failure {
    Data(Error),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

/// Parses `argv` (including the program name) and runs the command, writing results to
/// `out` and diagnostics to stderr.
pub fn run_with<I, T>(argv: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli, out)) {
        Ok(()) => EXIT_OK,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Verify) => EXIT_VERIFY,
    }
}

pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run_with(std::env::args_os(), &mut std::io::stdout())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn emit(out: &mut (dyn Write + Send), text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn load_config(path: Option<&Path>, seed: Option<u64>, iterations: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            TrainConfig::from_json(&text, &p.display().to_string())?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> std::result::Result<(), Failure> {
    let seed = cli.seed;
    match &cli.command {
        Command::MakeToy { name, out: dir, size, ppm } => {
            make_toy(name, dir, *size, *ppm, seed.unwrap_or(0))?;
            emit(out, &format!("wrote {name} to {}\n", dir.display()))?;
        }
        Command::Train {
            scene,
            images,
            config,
            out: dst,
            log,
            checkpoints,
            iterations,
        } => {
            let mut cfg = load_config(config.as_deref(), seed, *iterations)?;
            cfg.checkpoint_dir = checkpoints.clone();
            if let Some(d) = checkpoints {
                fs::create_dir_all(d).map_err(io_err(d))?;
            }
            let init = load_scene(scene)?;
            let data = load_dataset(images)?;
            let t = Instant::now();
            let res = train(init, &data, &cfg)?;
            save_scene(&res.scene, dst)?;
            if let Some(p) = log {
                fs::write(p, log_to_csv(&res.log)).map_err(io_err(p))?;
            }
            emit(
                out,
                &format!(
                    "trained {} iterations in {:.1}s: {} surfels, {} Gaussians -> {}\n",
                    cfg.iterations,
                    t.elapsed().as_secs_f64(),
                    res.scene.surfels.len(),
                    res.scene.gaussians.len(),
                    dst.display()
                ),
            )?;
        }
        Command::Render {
            scene,
            camera,
            out: dst,
            layers,
            dump_layers,
        } => {
            let scene = load_scene(scene)?;
            let cam = load_camera(camera)?;
            let r = render(&scene, &cam, *layers as usize);
            write_image(&r.image, dst)?;
            if *dump_layers {
                for p in dump_layer_maps(&r, dst)? {
                    emit(out, &format!("{}\n", p.display()))?;
                }
            }
            emit(out, &format!("{}\n", dst.display()))?;
        }
        Command::Eval {
            scene,
            images,
            layers,
            format,
            timing,
        } => {
            let scene = load_scene(scene)?;
            let data = load_dataset(images)?;
            emit(out, &eval_table(&scene, &data, *layers as usize, *format)?)?;
            if *timing {
                let ms = frame_time_ms(&scene, &data, *layers as usize, 100);
                emit(out, &format!("frame time {ms:.3} ms ({:.1} fps) over 100 renders\n", 1000.0 / ms))?;
            }
        }
        Command::Verify { suite, quick } => {
            let mut opts = VerifyOptions {
                seed: seed.unwrap_or(0),
                ..Default::default()
            };
            if *quick {
                opts.peel_scenes = 5;
                opts.peel_surfels = 100;
                opts.order_scenes = 2;
                opts.permutations = 5;
                opts.grad_scenes = 3;
            }
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut ok = true;
            for name in names {
                let rep = run_suite(name, &opts).expect("suite names are validated by the parser");
                let mut text = format!("[{}] {}\n", rep.name, if rep.passed { "PASS" } else { "FAIL" });
                for l in &rep.lines {
                    let _ = writeln!(text, "  {l}");
                }
                emit(out, &text)?;
                ok &= rep.passed;
            }
            if !ok {
                return Err(Failure::Verify);
            }
        }
        Command::Ablate {
            scene,
            images,
            config,
            iterations,
            format,
        } => {
            let cfg = load_config(config.as_deref(), seed, *iterations)?;
            let init = load_scene(scene)?;
            let data = load_dataset(images)?;
            let rows = ablate(&init, &data, &cfg)?;
            emit(out, &ablation_table(&rows, *format))?;
        }
    }
    Ok(())
}

/// Writes `<name>/scene.psplat`, `<name>/init.psplat`, `<name>/train.json` and the views
/// under `<name>/images/`.
pub fn make_toy(name: &str, dir: &Path, size: usize, ppm: bool, seed: u64) -> Result<()> {
    let toy = bundled(name, size, seed).ok_or_else(|| Error::Config(format!("unknown toy scene {name:?}")))?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_scene(&toy.scene, dir.join("scene.psplat"))?;
    save_scene(&perturb(&toy.scene, seed), dir.join("init.psplat"))?;
    let cfg = self_consistency_config(3000);
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    let cfg_path = dir.join("train.json");
    fs::write(&cfg_path, json).map_err(io_err(&cfg_path))?;
    save_dataset(dir.join("images"), &render_dataset(&toy.scene, &toy.cameras, 3), ppm)
}

/// `<stem>.depth<i>.pfm`, `<stem>.alpha<i>.pfm` for every layer and `<stem>.T<i>.pfm`
/// for `i = 1..=L`, next to `out`.
pub fn dump_layer_maps(r: &crate::composite::Render, out: &Path) -> Result<Vec<PathBuf>> {
    let stack = &r.stack;
    let (w, h) = (stack.width, stack.height);
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = out.parent().unwrap_or(Path::new("."));
    let mut written = Vec::new();
    let mut put = |suffix: String, values: Vec<f64>| -> Result<()> {
        let p = dir.join(format!("{stem}.{suffix}.pfm"));
        write_image(&Image::from_gray(w, h, values), &p)?;
        written.push(p);
        Ok(())
    };
    for i in 0..stack.layers {
        let layer = |f: &dyn Fn(&crate::raster_surfel::SurfelFragment) -> f64| -> Vec<f64> {
            stack.pixels.iter().map(|p| if i < p.count { f(&p.layers[i]) } else { 0.0 }).collect()
        };
        put(format!("depth{}", i + 1), layer(&|f| f.depth))?;
        put(format!("alpha{}", i + 1), layer(&|f| f.alpha))?;
        put(format!("T{}", i + 1), stack.transmittance_map(i + 1))?;
    }
    Ok(written)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-view PSNR and SSIM, clamping renders to `[0, 1]` first.
pub fn eval_rows(scene: &Scene, data: &Dataset, layers: usize) -> Result<Vec<(String, f64, f64)>> {
    data.views
        .iter()
        .map(|v| {
            let mut img = render(scene, &v.camera, layers).image;
            img.data.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            Ok((v.name.clone(), psnr(&img, &v.image)?, ssim(&img, &v.image)?))
        })
        .collect()
}

pub fn eval_table(scene: &Scene, data: &Dataset, layers: usize, format: TableFormat) -> Result<String> {
    let rows = eval_rows(scene, data, layers)?;
    let p: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut t = String::new();
    match format {
        TableFormat::Csv => t.push_str("view,psnr,ssim\n"),
        TableFormat::Markdown => t.push_str("| view | PSNR | SSIM |\n|---|---:|---:|\n"),
    }
    let all = rows.iter().cloned().chain(std::iter::once(("mean".to_string(), mean(&p), mean(&s))));
    for (name, ps, ss) in all {
        let _ = match format {
            TableFormat::Csv => writeln!(t, "{name},{ps:.4},{ss:.5}"),
            TableFormat::Markdown => writeln!(t, "| {name} | {ps:.2} | {ss:.4} |"),
        };
    }
    Ok(t)
}

/// Mean wall-clock milliseconds per render of the first view.
pub fn frame_time_ms(scene: &Scene, data: &Dataset, layers: usize, renders: usize) -> f64 {
    let Some(v) = data.views.first() else { return 0.0 };
    let t = Instant::now();
    for _ in 0..renders {
        std::hint::black_box(render(scene, &v.camera, layers));
    }
    t.elapsed().as_secs_f64() * 1000.0 / renders.max(1) as f64
}

pub const ABLATION_ROWS: [&str; 8] = [
    "full",
    "base-SH",
    "2-layer",
    "4-layer",
    "no-trans-grad",
    "no-Ls",
    "no-Lscale",
    "no-Lt",
];

/// The config for one row of the ablation grid.
pub fn ablation_config(base: &TrainConfig, row: &str) -> TrainConfig {
    let mut c = base.clone();
    match row {
        "full" => {}
        // the baseline keeps the colour model but drops error-driven Gaussian spawning
        "base-SH" => c.ablation.no_densify = true,
        "2-layer" => c.layers = 2,
        "4-layer" => c.layers = 4,
        "no-trans-grad" => c.ablation.trans_grad_off = true,
        "no-Ls" => c.ablation.no_ls = true,
        "no-Lscale" => c.ablation.no_lscale = true,
        "no-Lt" => c.ablation.no_lt = true,
        _ => panic!("unknown ablation row {row}"),
    }
    c
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub ssim: f64,
    pub psnr: f64,
    pub frame_ms: f64,
    pub train_s: f64,
    pub gaussians: usize,
}

pub fn ablate(init: &Scene, data: &Dataset, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|&name| {
            let cfg = ablation_config(base, name);
            let t = Instant::now();
            let res = train(init.clone(), data, &cfg)?;
            let train_s = t.elapsed().as_secs_f64();
            let rows = eval_rows(&res.scene, data, cfg.layers)?;
            Ok(AblationRow {
                name,
                ssim: mean(&rows.iter().map(|r| r.2).collect::<Vec<_>>()),
                psnr: mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
                frame_ms: frame_time_ms(&res.scene, data, cfg.layers, 10),
                train_s,
                gaussians: res.scene.gaussians.len(),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow], format: TableFormat) -> String {
    let mut t = String::new();
    match format {
        TableFormat::Csv => t.push_str("setting,ssim,psnr,frame_ms,train_s,gaussians\n"),
        TableFormat::Markdown => t.push_str(
            "| setting | SSIM | PSNR | frame ms | train s | Gaussians |\n|---|---:|---:|---:|---:|---:|\n",
        ),
    }
    for r in rows {
        let _ = match format {
            TableFormat::Csv => writeln!(
                t,
                "{},{:.5},{:.4},{:.3},{:.2},{}",
                r.name, r.ssim, r.psnr, r.frame_ms, r.train_s, r.gaussians
            ),
            TableFormat::Markdown => writeln!(
                t,
                "| {} | {:.4} | {:.2} | {:.2} | {:.1} | {} |",
                r.name, r.ssim, r.psnr, r.frame_ms, r.train_s, r.gaussians
            ),
        };
    }
    t
}
