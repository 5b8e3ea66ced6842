//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails. Takes tens of minutes on one core.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use gnf_core::checkpoint::encode_checkpoint;
use gnf_core::config::RunConfig;
use gnf_core::flops::{flops_mlp, flops_rbf, instrumented_rbf, published, FlopMode};
use gnf_core::gradcheck::{run_gradcheck, GradcheckConfig};
use gnf_core::image::{load_image, psnr, render_image, ImageBuffer};
use gnf_core::model::{FieldModel, Task};
use gnf_core::numerics::Rng;
use gnf_core::par::with_workers;
use gnf_core::pipeline::{load_target, run_fit, RunOutcome, Target};
use gnf_core::radiance::{
    composite, decode_radiance, generate_rays, radiance_loss_and_grad, render_view, sample_rays, segment_ray,
    PassCounter, RadianceDataset, RadianceFitConfig,
};
use gnf_core::sdf::{
    chamfer_l1, marching_cubes, model_field, normal_metrics, oracle_field, surface_chamfer_l1, volumetric_iou,
    SdfOracle, Shape, TriMesh,
};
use gnf_core::training::{FitConfig, GradBuffer, History};

const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_SECONDS: f64 = 30.0;
const PUBLISHED_RATIO: f64 = 0.505;
const QUOTED_FORMULA_RATIO: f64 = 0.516;
const RATIO_TOL: f64 = 1e-3;
const SDF_IOU_MIN: f64 = 0.99;
const SDF_CHAMFER_MAX: f64 = 2e-3;
const MESH_RES: usize = 256;
const IOU_RES: usize = 256;
const CHAMFER_SAMPLES: usize = 100_000;
const SLICE_LEVELS: [usize; 4] = [8, 10, 12, 16];
const IMAGE_PSNR_MIN: f64 = 30.0;
const IMAGE_JITTER_DB: f64 = 0.5;
const CONSTANT_PSNR_MIN: f64 = 60.0;
const CONSTANT_STEPS: usize = 200;
const RADIANCE_PSNR_MIN: f64 = 25.0;
const WEIGHT_SUM_SLACK: f64 = 1e-5;
const CONCENTRIC_IOU: f64 = 8.0 / 27.0;
const CONCENTRIC_TOL: f64 = 0.01;
const SDF_PREFIX: usize = 500;
const IMAGE_PREFIX: usize = 250;
const RADIANCE_PREFIX: usize = 100;

struct Report {
    lines: Vec<(u8, bool, String)>,
}

impl Report {
    fn record(&mut self, id: u8, name: &str, pass: bool, detail: String) {
        let line = format!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((id, pass, line));
    }
}

fn info(msg: impl AsRef<str>) {
    println!("    {}", msg.as_ref());
}

fn sphere() -> Shape {
    Shape::Sphere {
        center: [0.5; 3],
        radius: 0.3,
    }
}

fn torus() -> Shape {
    Shape::Torus {
        center: [0.5; 3],
        major: 0.3,
        minor: 0.1,
    }
}

fn csv_bytes(h: &History) -> Vec<u8> {
    let mut out = Vec::new();
    h.write_csv(&mut out).unwrap();
    out
}

fn prefix_history(h: &History, n: usize) -> History {
    History {
        rows: h.rows[..n.min(h.rows.len())].to_vec(),
    }
}

fn obj_bytes(mesh: &TriMesh) -> Vec<u8> {
    let mut out = Vec::new();
    mesh.write_obj(&mut out).unwrap();
    out
}

/// Runs `cfg` and keeps the encoded checkpoint taken after `capture` steps.
fn run_capturing(cfg: &RunConfig, target: &Target, capture: usize) -> (RunOutcome, Option<Vec<u8>>) {
    let mut bytes = None;
    let out = run_fit(cfg, target, |step, m| {
        if step == capture {
            bytes = Some(encode_checkpoint(m, step as u32)?);
        }
        Ok(())
    })
    .unwrap();
    (out, bytes)
}

/// The first `n` steps of `cfg`, with the learning-rate schedule of the full run.
fn prefix_config(cfg: &RunConfig, n: usize) -> RunConfig {
    let mut c = cfg.clone();
    match cfg.task {
        Task::Radiance => {
            let full = cfg.radiance_fit_config();
            let mut f = full.clone();
            f.steps = n;
            f.checkpoint_every = n;
            f.optim = full.optim.for_run(full.steps);
            c.radiance_fit = Some(f);
        }
        _ => {
            let full = cfg.fit_config();
            let mut f = full.clone();
            f.steps = n;
            f.checkpoint_every = n;
            f.optim = full.optim.for_run(full.steps);
            c.fit = Some(f);
        }
    }
    c
}

/// Task-specific rendered output of a model, as bytes.
fn output_bytes(model: &FieldModel<f32>, target: &Target) -> Vec<u8> {
    match target {
        Target::Sdf(_) => obj_bytes(&marching_cubes(&model_field(model, model.levels()), 64, 0.0).unwrap()),
        Target::Image(img) => render_image(model, img.width, img.height, model.levels()).unwrap().0.to_rgb8(),
        Target::Radiance(data) => {
            let settings = data.render_settings(64);
            render_view(model, &data.test[0].camera, &settings, None).unwrap().to_rgb8()
        }
    }
}

struct Repeat {
    checkpoint: Vec<u8>,
    csv: Vec<u8>,
    output: Vec<u8>,
}

fn repeat_prefix(cfg: &RunConfig, target: &Target, n: usize) -> Repeat {
    with_workers(1, || {
        let (out, ckpt) = run_capturing(&prefix_config(cfg, n), target, n);
        Repeat {
            checkpoint: ckpt.expect("prefix checkpoint"),
            csv: csv_bytes(&out.history),
            output: output_bytes(&out.model, target),
        }
    })
}

struct DeterminismCase {
    name: &'static str,
    full_checkpoint: Vec<u8>,
    full_csv_prefix: Vec<u8>,
    cfg: RunConfig,
    target: Target,
    prefix: usize,
}

fn criterion_gradients(r: &mut Report) {
    let start = Instant::now();
    let cfg = GradcheckConfig {
        tolerance: GRADCHECK_TOL,
        ..GradcheckConfig::default()
    };
    let suites = run_gradcheck(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst_all: f64 = 0.0;
    for s in &suites {
        let w = s.worst.as_ref().map_or(0.0, |w| w.rel_error);
        worst_all = worst_all.max(w);
        info(format!(
            "{}: {} instances, {} partials, worst rel error {:.2e} ({})",
            s.suite,
            s.instances,
            s.checked,
            w,
            s.worst.as_ref().map_or("-", |w| w.param.as_str())
        ));
    }
    let pass = suites.len() == 3 && suites.iter().all(|s| s.passed && s.instances == 20) && secs < GRADCHECK_SECONDS;
    r.record(
        1,
        "gradient suite",
        pass,
        format!("worst rel error {worst_all:.2e} <= {GRADCHECK_TOL:.0e}, {secs:.1}s < {GRADCHECK_SECONDS}s"),
    );
}

fn criterion_flops(r: &mut Report) {
    let (f, w, b) = (published::F, published::WIDTH, published::B);
    // closed forms evaluated term by term
    let mlp_layers = f * w + w * w + w;
    let mlp_fwd = 2 * mlp_layers * b;
    let rbf_fwd = 3 * f * b * w + 3 * b * w;
    let rbf_tot = 7 * f * b * w + 6 * b * w;
    let mut exact = flops_mlp(f, w, b, FlopMode::Forward) == mlp_fwd
        && flops_mlp(f, w, b, FlopMode::Total) == 3 * mlp_fwd
        && flops_rbf(f, w, b, FlopMode::Forward) == rbf_fwd
        && flops_rbf(f, w, b, FlopMode::Total) == rbf_tot;
    exact &= mlp_fwd == 124_160_000 && rbf_fwd == 63_360_000 && rbf_tot == 147_200_000 && 3 * mlp_fwd == 372_480_000;
    let mut rng = Rng::new(0);
    let mut instrumented_ok = true;
    for (m, n, bb) in [(32usize, 64usize, 10_000usize), (2, 4, 7), (5, 3, 11)] {
        let got = instrumented_rbf(m, n, bb, &mut rng).unwrap();
        let want = ((3 * m + 3) * bb * n) as u64;
        info(format!("instrumented RBF forward m={m} N={n} B={bb}: {got} (expected {want})"));
        instrumented_ok &= got == want;
    }
    let published_ratio = published::RBF_TOTAL / published::MLP_TOTAL;
    let formula_ratio = rbf_tot as f64 / (3 * mlp_fwd) as f64;
    let mixed_ratio = published::RBF_TOTAL / (3 * mlp_fwd) as f64;
    info(format!("closed forms: MLP {:.2}M / {:.2}M, RBF {:.2}M / {:.2}M (forward / total)",
        mlp_fwd as f64 / 1e6, 3.0 * mlp_fwd as f64 / 1e6, rbf_fwd as f64 / 1e6, rbf_tot as f64 / 1e6));
    info(format!("published totals ratio 192.0/380.2 = {published_ratio:.4}"));
    info(format!("closed-form totals ratio 147.20/372.48 = {formula_ratio:.4}"));
    info(format!(
        "FLAG: the quoted formula ratio {QUOTED_FORMULA_RATIO} is only reproduced as 192.0/372.48 = {mixed_ratio:.4}, \
         published RBF total over closed-form MLP total"
    ));
    let pass = exact
        && instrumented_ok
        && (published_ratio - PUBLISHED_RATIO).abs() < RATIO_TOL
        && (mixed_ratio - QUOTED_FORMULA_RATIO).abs() < RATIO_TOL;
    r.record(
        2,
        "FLOP formulas",
        pass,
        format!(
            "closed forms exact {exact}, instrumented (3m+3)BN {instrumented_ok}, ratios {published_ratio:.3} (published) / \
             {mixed_ratio:.3} (mixed, flagged) / {formula_ratio:.3} (closed form)"
        ),
    );
}

fn sdf_config(shape: Shape) -> RunConfig {
    let mut cfg = RunConfig::new(Task::Sdf);
    cfg.io.shape = Some(shape);
    let mut f = FitConfig::sdf_default();
    f.checkpoint_every = SDF_PREFIX;
    cfg.fit = Some(f);
    cfg
}

struct SdfScore {
    iou: f64,
    surface_chamfer: f64,
    point_chamfer: f64,
    watertight: bool,
    faces: usize,
}

fn score_sdf(model: &FieldModel<f32>, shape: &Shape, levels: usize, iou: bool) -> SdfScore {
    let field = model_field(model, levels);
    let mesh = marching_cubes(&field, MESH_RES, 0.0).unwrap();
    let iou = if iou {
        volumetric_iou(&field, &oracle_field(shape), IOU_RES).unwrap()
    } else {
        f64::NAN
    };
    if mesh.is_empty() {
        return SdfScore {
            iou,
            surface_chamfer: f64::INFINITY,
            point_chamfer: f64::INFINITY,
            watertight: false,
            faces: 0,
        };
    }
    let rng = Rng::new(7);
    let surface_chamfer = surface_chamfer_l1(&mesh, shape, CHAMFER_SAMPLES, &mut rng.substream("surface")).unwrap();
    let (a, _) = mesh.sample_surface(CHAMFER_SAMPLES, &mut rng.substream("mesh")).unwrap();
    let mut rr = rng.substream("oracle");
    let b: Vec<_> = (0..CHAMFER_SAMPLES).map(|_| shape.sample_surface(&mut rr)).collect();
    SdfScore {
        iou,
        surface_chamfer,
        point_chamfer: chamfer_l1(&a, &b).unwrap(),
        watertight: mesh.is_watertight(),
        faces: mesh.faces.len(),
    }
}

fn criteria_sdf(r: &mut Report, det: &mut Vec<DeterminismCase>) {
    let mut pass3 = true;
    let mut detail = Vec::new();
    let mut torus_model = None;
    for (name, shape) in [("sphere", sphere()), ("torus", torus())] {
        let cfg = sdf_config(shape.clone());
        let target = Target::Sdf(Box::new(shape.clone()));
        let start = Instant::now();
        let (out, ckpt) = run_capturing(&cfg, &target, SDF_PREFIX);
        let fit_secs = start.elapsed().as_secs_f64();
        let s = score_sdf(&out.model, &shape, out.model.levels(), true);
        info(format!(
            "{name}: fit {fit_secs:.0}s, loss {:.4} -> {:.5}, IoU@{IOU_RES} {:.5}, chamfer surface {:.2e} / point-set {:.2e} \
             (info), mesh@{MESH_RES} {} faces watertight {}",
            out.summary.first_loss.unwrap_or(f64::NAN),
            out.summary.final_loss.unwrap_or(f64::NAN),
            s.iou,
            s.surface_chamfer,
            s.point_chamfer,
            s.faces,
            s.watertight
        ));
        let ok = s.iou >= SDF_IOU_MIN && s.surface_chamfer <= SDF_CHAMFER_MAX && s.watertight;
        pass3 &= ok;
        detail.push(format!("{name} IoU {:.4} chamfer {:.1e} watertight {}", s.iou, s.surface_chamfer, s.watertight));
        if name == "torus" {
            det.push(DeterminismCase {
                name: "sdf torus",
                full_checkpoint: ckpt.expect("checkpoint"),
                full_csv_prefix: csv_bytes(&prefix_history(&out.history, SDF_PREFIX)),
                cfg,
                target,
                prefix: SDF_PREFIX,
            });
            torus_model = Some(out.model);
        }
    }
    r.record(3, "SDF desk-scale", pass3, detail.join("; "));

    let model = torus_model.unwrap();
    let shape = torus();
    let mut chamfers = Vec::new();
    let mut k8_closed = false;
    for &k in &SLICE_LEVELS {
        let s = score_sdf(&model, &shape, k, false);
        info(format!(
            "torus k={k}: {} faces, watertight {}, chamfer surface {:.3e} / point-set {:.3e} (info)",
            s.faces, s.watertight, s.surface_chamfer, s.point_chamfer
        ));
        if k == 8 {
            k8_closed = s.faces > 0 && s.watertight;
        }
        chamfers.push(s.surface_chamfer);
    }
    let monotone = chamfers.windows(2).all(|w| w[1] <= w[0]);
    let seq: Vec<String> = chamfers.iter().map(|c| format!("{c:.2e}")).collect();
    r.record(
        4,
        "hierarchical slicing",
        monotone && k8_closed,
        format!("chamfer over k={SLICE_LEVELS:?}: [{}] non-increasing {monotone}, k=8 closed {k8_closed}", seq.join(", ")),
    );
}

fn criterion_image(r: &mut Report, det: &mut Vec<DeterminismCase>) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/astronaut_256.png");
    let img = load_image(&path).unwrap();
    assert_eq!((img.width, img.height), (256, 256));
    let mut cfg = RunConfig::new(Task::Image);
    cfg.io.image = Some(path);
    let mut f = FitConfig::image_default();
    f.checkpoint_every = IMAGE_PREFIX;
    cfg.fit = Some(f.clone());
    let target = Target::Image(img.clone());
    let marks = [f.steps / 4, f.steps / 2, f.steps];
    let mut at_marks = BTreeMap::new();
    let mut ckpt = None;
    let start = Instant::now();
    let out = run_fit(&cfg, &target, |step, m| {
        if step == IMAGE_PREFIX {
            ckpt = Some(encode_checkpoint(m, step as u32)?);
        }
        if marks.contains(&step) {
            let (out, _) = render_image(m, img.width, img.height, m.levels())?;
            at_marks.insert(step, psnr(&out, &img)?);
        }
        Ok(())
    })
    .unwrap();
    let psnrs: Vec<f64> = marks.iter().map(|s| at_marks[s]).collect();
    info(format!(
        "astronaut 256x256: {} steps x {} pixels in {:.0}s, PSNR at {marks:?} = {:.2?} dB (8-bit final {:.2} dB)",
        f.steps,
        f.batch_size,
        start.elapsed().as_secs_f64(),
        psnrs,
        out.summary.metrics["psnr_8bit"]
    ));
    for k in [4, 8, 16] {
        let (o, _) = render_image(&out.model, 256, 256, k).unwrap();
        info(format!("level slice k={k}: PSNR {:.2} dB", psnr(&o, &img).unwrap()));
    }
    let final_psnr = psnrs[2];
    let steady = psnrs.windows(2).all(|w| w[1] >= w[0] - IMAGE_JITTER_DB);
    det.push(DeterminismCase {
        name: "image",
        full_checkpoint: ckpt.expect("checkpoint"),
        full_csv_prefix: csv_bytes(&prefix_history(&out.history, IMAGE_PREFIX)),
        cfg,
        target,
        prefix: IMAGE_PREFIX,
    });

    // constant control: the first steps of a default image run
    let color = [180.0 / 255.0, 90.0 / 255.0, 40.0 / 255.0];
    let flat = ImageBuffer::from_fn(256, 256, |_, _| color);
    let mut ccfg = RunConfig::new(Task::Image);
    let mut cf = FitConfig::image_default();
    cf.optim = cf.optim.for_run(cf.steps);
    cf.steps = CONSTANT_STEPS;
    cf.checkpoint_every = 25;
    ccfg.fit = Some(cf);
    let mut first_hit = None;
    let mut trace = Vec::new();
    let cout = run_fit(&ccfg, &Target::Image(flat.clone()), |step, m| {
        let (o, _) = render_image(m, 256, 256, m.levels())?;
        let p = psnr(&o, &flat)?;
        trace.push(format!("{step}:{p:.1}"));
        if p >= CONSTANT_PSNR_MIN && first_hit.is_none() {
            first_hit = Some(step);
        }
        Ok(())
    })
    .unwrap();
    let control = cout.summary.metrics["psnr"];
    info(format!("constant control PSNR by step: {}", trace.join(" ")));
    r.record(
        5,
        "image desk-scale",
        final_psnr >= IMAGE_PSNR_MIN && steady && first_hit.is_some(),
        format!(
            "final {final_psnr:.2} dB >= {IMAGE_PSNR_MIN}, checkpoints non-decreasing within {IMAGE_JITTER_DB} dB {steady}, \
             constant control {control:.2} dB at step {CONSTANT_STEPS} (>= {CONSTANT_PSNR_MIN} dB first at step {})",
            first_hit.map_or("never".to_string(), |s| s.to_string())
        ),
    );
}

/// Largest amount by which a test ray's compositing weights exceed 1.
fn weight_violation(model: &FieldModel<f32>, data: &RadianceDataset, samples: usize) -> (f64, f64, usize) {
    let mut worst = f64::NEG_INFINITY;
    let mut max_sum: f64 = 0.0;
    let mut rays = 0;
    for v in &data.test {
        for y in 0..v.camera.height {
            for x in 0..v.camera.width {
                let (o, d) = generate_rays(&v.camera, x, y).unwrap();
                let seg = segment_ray(data.near, data.far, samples, None).unwrap();
                let mut sigmas = Vec::with_capacity(samples);
                let mut rgbs = Vec::with_capacity(samples);
                for &t in &seg.t {
                    let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
                    let s = decode_radiance(model, p, d).unwrap();
                    sigmas.push(s.sigma);
                    rgbs.push(s.rgb);
                }
                let c = composite(&sigmas, &rgbs, &seg.delta, data.background).unwrap();
                let sum: f64 = c.weights.iter().sum();
                max_sum = max_sum.max(sum);
                worst = worst.max(sum - 1.0);
                rays += 1;
            }
        }
    }
    (worst, max_sum, rays)
}

fn criterion_radiance(r: &mut Report, det: &mut Vec<DeterminismCase>) {
    let mut cfg = RunConfig::new(Task::Radiance);
    let mut f = RadianceFitConfig::default();
    f.checkpoint_every = RADIANCE_PREFIX;
    cfg.radiance_fit = Some(f.clone());
    let target = load_target(&cfg).unwrap();
    let Target::Radiance(data) = &target else { unreachable!() };
    let views = (data.train.len(), data.test.len(), data.train[0].camera.width, data.train[0].camera.height);
    let start = Instant::now();
    let (out, ckpt) = run_capturing(&cfg, &target, RADIANCE_PREFIX);
    let test_psnr = out.summary.metrics["test_psnr"];
    let first = out.summary.first_loss.unwrap();
    let last = out.summary.final_loss.unwrap();
    info(format!(
        "{} train / {} test views at {}x{}, {} steps x {} rays x {} samples in {:.0}s, loss {first:.4} -> {last:.5} ({:.1}x drop)",
        views.0,
        views.1,
        views.2,
        views.3,
        f.steps,
        f.rays_per_batch,
        f.samples,
        start.elapsed().as_secs_f64(),
        first / last
    ));
    let (violation, max_sum, rays) = weight_violation(&out.model, data, f.samples);
    info(format!("compositing weights over {rays} test rays: max sum {max_sum:.8}"));

    let settings = data.render_settings(f.samples);
    let cam = &data.test[0].camera;
    let mut pc = PassCounter::default();
    render_view(&out.model, cam, &settings, Some(&mut pc)).unwrap();
    let want = (cam.width * cam.height) as u64 * f.samples as u64;
    let batch = sample_rays(data, f.rays_per_batch, f.samples, &mut Rng::new(3)).unwrap();
    let mut tc = PassCounter::default();
    let mut grads = GradBuffer::new(&out.model);
    radiance_loss_and_grad(&out.model, &batch, data.background, &mut grads, Some(&mut tc)).unwrap();
    let train_want = (f.rays_per_batch * f.samples) as u64;
    info(format!(
        "passes: render {}/{} encodes/decodes for {want} samples, training batch {}/{} for {train_want}",
        pc.encodes, pc.decodes, tc.encodes, tc.decodes
    ));
    let passes_ok = pc.encodes == want && pc.decodes == want && tc.encodes == train_want && tc.decodes == train_want;
    det.push(DeterminismCase {
        name: "radiance",
        full_checkpoint: ckpt.expect("checkpoint"),
        full_csv_prefix: csv_bytes(&prefix_history(&out.history, RADIANCE_PREFIX)),
        cfg,
        target,
        prefix: RADIANCE_PREFIX,
    });
    r.record(
        6,
        "radiance desk-scale",
        test_psnr >= RADIANCE_PSNR_MIN && violation < WEIGHT_SUM_SLACK && passes_ok,
        format!(
            "held-out PSNR {test_psnr:.2} dB >= {RADIANCE_PSNR_MIN}, weight-sum excess {:.1e} < {WEIGHT_SUM_SLACK:.0e}, \
             one encode+decode per sample {passes_ok}",
            violation.max(0.0)
        ),
    );
}

fn criterion_determinism(r: &mut Report, cases: &[DeterminismCase]) {
    let mut pass = cases.len() == 3;
    let mut detail = Vec::new();
    for c in cases {
        let a = repeat_prefix(&c.cfg, &c.target, c.prefix);
        let b = repeat_prefix(&c.cfg, &c.target, c.prefix);
        let repeat = a.checkpoint == b.checkpoint && a.csv == b.csv && a.output == b.output;
        let full = a.checkpoint == c.full_checkpoint && a.csv == c.full_csv_prefix;
        info(format!(
            "{}: {} steps twice with 1 worker: checkpoint ({} bytes), loss csv and output identical {repeat}; \
             matches the full run at step {} {full}",
            c.name,
            c.prefix,
            a.checkpoint.len(),
            c.prefix
        ));
        pass &= repeat && full;
        detail.push(format!("{} {}", c.name, repeat && full));
    }
    r.record(7, "determinism", pass, format!("bit-identical repeats: {}", detail.join(", ")));
}

fn criterion_metrics(r: &mut Report) {
    let s = sphere();
    let mut rng = Rng::new(11);
    let pts: Vec<_> = (0..5000).map(|_| s.sample_surface(&mut rng)).collect();
    let cd = chamfer_l1(&pts, &pts).unwrap();
    let mesh = marching_cubes(&oracle_field(&s), 64, 0.0).unwrap();
    let nm = normal_metrics(&mesh, &mesh, 20_000, &mut Rng::new(12)).unwrap();
    let f = oracle_field(&s);
    let iou_same = volumetric_iou(&f, &f, 64).unwrap();
    let inner = Shape::Sphere {
        center: [0.5; 3],
        radius: 0.2,
    };
    let iou_conc = volumetric_iou(&oracle_field(&inner), &f, 256).unwrap();
    let pass = cd == 0.0
        && (nm.nc - 1.0).abs() < 1e-9
        && nm.nae_deg.abs() < 1e-3
        && iou_same == 1.0
        && (iou_conc - CONCENTRIC_IOU).abs() < CONCENTRIC_TOL;
    r.record(
        8,
        "metric sanity",
        pass,
        format!(
            "identical: chamfer {cd}, NC {:.9}, NAE {:.2e} deg, IoU {iou_same}; concentric r 0.2/0.3 IoU@256 {iou_conc:.4} \
             (expected {CONCENTRIC_IOU:.4} +- {CONCENTRIC_TOL})",
            nm.nc, nm.nae_deg
        ),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut report = Report { lines: Vec::new() };
    let mut det = Vec::new();
    criterion_gradients(&mut report);
    criterion_flops(&mut report);
    criterion_metrics(&mut report);
    criteria_sdf(&mut report, &mut det);
    criterion_image(&mut report, &mut det);
    criterion_radiance(&mut report, &mut det);
    criterion_determinism(&mut report, &det);

    report.lines.sort_by_key(|l| l.0);
    println!("\nacceptance summary ({:.0}s)", start.elapsed().as_secs_f64());
    for (_, _, line) in &report.lines {
        println!("{line}");
    }
    if report.lines.iter().all(|l| l.1) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
