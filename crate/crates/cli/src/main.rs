use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gnf_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gnf_core::config::RunConfig;
use gnf_core::flops::{run_bench, BenchConfig};
use gnf_core::gradcheck::{run_gradcheck, GradcheckConfig};
use gnf_core::image::{error_map, load_image, psnr, render_image, save_image};
use gnf_core::model::Task;
use gnf_core::par::with_workers;
use gnf_core::pipeline::{load_target, run_fit};
use gnf_core::radiance::{render_view, PassCounter, ToyScene};
use gnf_core::sdf::{marching_cubes, model_field, save_mesh, TriMesh};
use gnf_core::Error;

/// Exit status with a message for stderr.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::TrainingAbort { .. } | Error::NonFinite { .. } => 3,
            _ => 2,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "gnf", version, about = "Hash-grid neural fields with a Gaussian RBF decoder")]
struct Cli {
    /// Worker threads; 0 uses every core. A single worker is bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a signed distance field.
    FitSdf(FitArgs),
    /// Fit an RGB image.
    FitImage(FitArgs),
    /// Fit a toy radiance field from rendered views.
    FitRadiance(FitArgs),
    /// Render an image or radiance checkpoint to PNG/PPM.
    Render(RenderArgs),
    /// Extract the zero level set of an SDF checkpoint.
    ExtractMesh(MeshArgs),
    /// FLOP counts and decoder throughput.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct FitArgs {
    /// JSON run configuration.
    config: PathBuf,
    /// Output directory; overrides io.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    /// Output image (.png or .ppm).
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Decode only the first k levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Reference image for PSNR and the error map.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write a per-pixel error map against the reference.
    #[arg(long, requires = "reference")]
    error_map: Option<PathBuf>,
    /// Residual mapped to the top of the error ramp.
    #[arg(long, default_value_t = 0.1)]
    error_cap: f64,
    /// Radiance: scene JSON; the built-in two-sphere scene by default.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Radiance: camera split of the scene.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Radiance: camera index within the split.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Radiance: samples per ray.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Args)]
struct MeshArgs {
    checkpoint: PathBuf,
    /// Output mesh (.obj or .ply).
    #[arg(long, short)]
    out: PathBuf,
    /// Lattice resolution per axis.
    #[arg(long, default_value_t = 128)]
    res: usize,
    #[arg(long, default_value_t = 0.0)]
    iso: f64,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    features: usize,
    /// MLP width and RBF kernel count.
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 10_000)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Skip the timing runs.
    #[arg(long)]
    counts_only: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let workers = cli.workers;
    match with_workers(workers, move || dispatch(cli.cmd, workers)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command, workers: usize) -> CliResult {
    match cmd {
        Command::FitSdf(a) => cmd_fit(Task::Sdf, a),
        Command::FitImage(a) => cmd_fit(Task::Image, a),
        Command::FitRadiance(a) => cmd_fit(Task::Radiance, a),
        Command::Render(a) => cmd_render(a),
        Command::ExtractMesh(a) => cmd_extract_mesh(a),
        Command::Bench(a) => cmd_bench(a, workers),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var("GNF_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("GNF_SEED: expected an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn cmd_fit(task: Task, args: FitArgs) -> CliResult {
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.task != task {
        return Err(Failure::usage(format!(
            "task: {} config given to fit-{}",
            cfg.task.name(),
            task.name()
        )));
    }
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        if task == Task::Radiance {
            let mut f = cfg.radiance_fit_config();
            f.steps = steps;
            cfg.radiance_fit = Some(f);
        } else {
            let mut f = cfg.fit_config();
            f.steps = steps;
            cfg.fit = Some(f);
        }
    }
    cfg.validate()?;
    let out_dir = args
        .out_dir
        .or_else(|| cfg.io.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| Failure::usage(format!("{}: {e}", out_dir.display())))?;
    let target = load_target(&cfg)?;
    let ckpt_dir = out_dir.clone();
    let out = run_fit(&cfg, &target, |step, model| {
        save_checkpoint(&ckpt_dir.join(format!("model-{step:06}.gnf")), model, step as u32)
    })?;
    let steps = out.history.len() as u32;
    save_checkpoint(&out_dir.join("model.gnf"), &out.model, steps)?;
    out.history.save_csv(&out_dir.join("loss.csv"))?;
    let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    write_file(&out_dir.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn levels_arg(ck: &Checkpoint, levels: Option<usize>) -> Result<usize, Failure> {
    let total = ck.model.levels();
    match levels {
        None => Ok(total),
        Some(k) if (1..=total).contains(&k) => Ok(k),
        Some(k) => Err(Failure::usage(format!("--levels: {k} not in 1..={total}"))),
    }
}

fn cmd_render(args: RenderArgs) -> CliResult {
    let ck = load_checkpoint(&args.checkpoint)?;
    let model = &ck.model;
    let img = match model.task {
        Task::Sdf => {
            return Err(Failure::usage(
                "render: SDF checkpoints have no image, use extract-mesh",
            ))
        }
        Task::Image => {
            let levels = levels_arg(&ck, args.levels)?;
            let side = model.grid.config().n_max;
            let (w, h) = (args.width.unwrap_or(side), args.height.unwrap_or(side));
            let (img, stats) = render_image(model, w, h, levels)?;
            println!("rendered {w}x{h} with {levels} levels: {:.0} pixels/s", stats.pixels_per_sec);
            img
        }
        Task::Radiance => {
            if args.levels.is_some() {
                return Err(Failure::usage("--levels: not supported for radiance checkpoints"));
            }
            let scene = match &args.scene {
                Some(p) => ToyScene::load(p)?,
                None => ToyScene::two_spheres(),
            };
            let (train, test) = scene.cameras()?;
            let cams = match args.split {
                Split::Train => train,
                Split::Test => test,
            };
            let mut cam = cams
                .get(args.view)
                .cloned()
                .ok_or_else(|| Failure::usage(format!("--view: {} of {} cameras", args.view, cams.len())))?;
            if let Some(w) = args.width {
                cam.focal *= w as f64 / cam.width as f64;
                cam.width = w;
            }
            if let Some(h) = args.height {
                cam.height = h;
            }
            let settings = scene.render_settings(args.samples);
            let mut counter = PassCounter::default();
            let start = std::time::Instant::now();
            let img = render_view(model, &cam, &settings, Some(&mut counter))?;
            let secs = start.elapsed().as_secs_f64();
            println!(
                "rendered {}x{} at {} samples/ray: {:.0} pixels/s, {} field queries",
                cam.width,
                cam.height,
                args.samples,
                img.pixel_count() as f64 / secs.max(1e-9),
                counter.decodes
            );
            img
        }
    };
    save_image(&args.out, &img)?;
    if let Some(ref_path) = &args.reference {
        let reference = load_image(ref_path)?;
        println!(
            "psnr {:.3} dB (8-bit {:.3} dB)",
            psnr(&img, &reference)?,
            psnr(&img.quantized(), &reference)?
        );
        if let Some(map_path) = &args.error_map {
            save_image(map_path, &error_map(&img, &reference, args.error_cap)?)?;
        }
    }
    Ok(())
}

fn cmd_extract_mesh(args: MeshArgs) -> CliResult {
    let ck = load_checkpoint(&args.checkpoint)?;
    if ck.model.task != Task::Sdf {
        return Err(Failure::usage(format!(
            "extract-mesh: needs an SDF checkpoint, got {}",
            ck.model.task.name()
        )));
    }
    let levels = levels_arg(&ck, args.levels)?;
    let mesh = marching_cubes(&model_field(&ck.model, levels), args.res, args.iso)?;
    if mesh.is_empty() {
        eprintln!("warning: no surface at iso {}; writing an empty mesh", args.iso);
        save_mesh(&args.out, &TriMesh::default())?;
        return Ok(());
    }
    save_mesh(&args.out, &mesh)?;
    println!(
        "{} vertices, {} triangles, watertight {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        mesh.is_watertight()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs, workers: usize) -> CliResult {
    let cfg = BenchConfig {
        f: args.features,
        width: args.width,
        batch: args.batch,
        warmup: args.warmup,
        repeats: args.repeats,
        counts_only: args.counts_only,
        workers,
        seed: 0,
    };
    let report = run_bench(&cfg)?;
    let mut table = Vec::new();
    report.write_table(&mut table).expect("in-memory write");
    print!("{}", String::from_utf8_lossy(&table));
    if let Some(path) = &args.csv {
        let mut csv = Vec::new();
        report.write_csv(&mut csv).expect("in-memory write");
        write_file(path, &String::from_utf8_lossy(&csv))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult {
    let cfg = GradcheckConfig {
        instances: args.instances,
        seed: args.seed,
        tolerance: args.tolerance,
        ..GradcheckConfig::default()
    };
    if cfg.instances == 0 || !(cfg.tolerance > 0.0) {
        return Err(Failure::usage("gradcheck: needs --instances >= 1 and --tolerance > 0"));
    }
    let results = run_gradcheck(&cfg)?;
    let mut failed = Vec::new();
    for r in &results {
        let w = r.worst.as_ref().expect("every suite checks parameters");
        println!(
            "{:<4} {:<10} {:>5} checks, worst rel {:.2e} at instance {} {} (analytic {:.6e}, numeric {:.6e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.suite,
            r.checked,
            w.rel_error,
            w.instance,
            w.param,
            w.analytic,
            w.numeric
        );
        if !r.passed {
            failed.push(format!("{} {} (instance {})", r.suite, w.param, w.instance));
        }
    }
    if let Some(path) = &args.json {
        write_file(path, &serde_json::to_string_pretty(&results).expect("report serializes"))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!("gradient tolerance exceeded: {}", failed.join(", ")),
        })
    }
}
