//! WebAssembly bindings for the browser demo: an image fit with a level
//! slider, an SDF slice viewer, and a FLOP calculator.

use gnf_core::flops::{flops_mlp, flops_rbf, FlopMode};
use gnf_core::grid::GridConfig;
use gnf_core::image::{pixel_center, psnr, ImageBuffer};
use gnf_core::model::{CenterInit, FieldModel, Task};
use gnf_core::numerics::Rng;
use gnf_core::rbf::{DecoderConfig, KernelMode};
use gnf_core::sdf::{SdfOracle, Shape};
use gnf_core::training::{sample_pixels, sample_sdf_points, train_step, GradBuffer, Loss, OptimConfig, Optimizer};
use wasm_bindgen::prelude::*;

fn js_err(e: gnf_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A model with its optimizer state and sampling stream.
struct Trainer {
    model: FieldModel<f32>,
    opt: Optimizer<f32>,
    grads: GradBuffer<f32>,
    rng: Rng,
    step: usize,
}

impl Trainer {
    fn new(task: Task, grid: GridConfig, seed: u64) -> gnf_core::Result<Self> {
        let dec = DecoderConfig {
            kernels: 64,
            mode: KernelMode::Spherical,
        };
        let root = Rng::new(seed);
        let model = FieldModel::new(task, grid, &dec, CenterInit::Features, &root.substream("init"))?;
        let opt = Optimizer::new(&model, OptimConfig::default())?;
        let grads = GradBuffer::new(&model);
        Ok(Self {
            model,
            opt,
            grads,
            rng: root.substream("batches"),
            step: 0,
        })
    }
}

/// 8-bit RGBA with opaque alpha.
fn rgba(img: &ImageBuffer) -> Vec<u8> {
    img.to_rgb8()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn render_levels(model: &FieldModel<f32>, width: u32, height: u32, levels: usize) -> gnf_core::Result<ImageBuffer> {
    let mut pts = Vec::with_capacity(width as usize * height as usize * 2);
    for y in 0..height {
        for x in 0..width {
            let c = pixel_center(x, y, width, height);
            pts.extend([c[0] as f32, c[1] as f32]);
        }
    }
    let out = model.query_levels(&pts, levels.clamp(1, model.levels()))?;
    let mut img = ImageBuffer::new(width, height);
    img.data = out.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(img)
}

/// Fits a small image in steps driven from JavaScript.
#[wasm_bindgen]
pub struct ImageFit {
    trainer: Trainer,
    target: ImageBuffer,
}

impl ImageFit {
    fn create(width: u32, height: u32, rgba: &[u8], seed: u64) -> gnf_core::Result<Self> {
        let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
        let target = ImageBuffer::from_rgb8(width, height, &rgb)?;
        let mut grid = GridConfig::image_default(width.max(height));
        grid.log2_table_size = 16;
        Ok(Self {
            trainer: Trainer::new(Task::Image, grid, seed)?,
            target,
        })
    }

    fn run(&mut self, steps: usize, batch: usize) -> gnf_core::Result<f64> {
        let t = &mut self.trainer;
        let mut loss = f64::NAN;
        for _ in 0..steps {
            let b = sample_pixels(&self.target, batch, &mut t.rng)?;
            loss = train_step(&mut t.model, &b, &Loss::L2, &mut t.opt, &mut t.grads, t.step)?;
            t.step += 1;
        }
        Ok(loss)
    }

    fn render_image(&self, levels: usize) -> gnf_core::Result<ImageBuffer> {
        render_levels(&self.trainer.model, self.target.width, self.target.height, levels)
    }
}

#[wasm_bindgen]
impl ImageFit {
    /// `rgba` holds `width * height` RGBA pixels, as from a canvas.
    #[wasm_bindgen(constructor)]
    pub fn new(width: u32, height: u32, rgba: &[u8], seed: u32) -> Result<ImageFit, JsError> {
        Self::create(width, height, rgba, seed as u64).map_err(js_err)
    }

    /// Runs `steps` training steps of `batch` pixels; returns the last loss.
    pub fn train(&mut self, steps: usize, batch: usize) -> Result<f64, JsError> {
        self.run(steps, batch).map_err(js_err)
    }

    pub fn step(&self) -> usize {
        self.trainer.step
    }

    pub fn levels(&self) -> usize {
        self.trainer.model.levels()
    }

    /// RGBA reconstruction using the first `levels` levels.
    pub fn render(&self, levels: usize) -> Result<Vec<u8>, JsError> {
        self.render_image(levels).map(|img| rgba(&img)).map_err(js_err)
    }

    pub fn psnr(&self, levels: usize) -> Result<f64, JsError> {
        let img = self.render_image(levels).map_err(js_err)?;
        psnr(&img, &self.target).map_err(js_err)
    }
}

fn demo_shape(name: &str) -> Option<Shape> {
    match name {
        "sphere" => Some(Shape::Sphere {
            center: [0.5; 3],
            radius: 0.3,
        }),
        "torus" => Some(Shape::Torus {
            center: [0.5; 3],
            major: 0.3,
            minor: 0.1,
        }),
        _ => None,
    }
}

/// Signed distance in a z-slice: blue inside, orange outside, faint
/// contour bands every 0.02 and a white zero line.
fn sdf_color(d: f64) -> [u8; 4] {
    let base = if d < 0.0 { [0.25, 0.45, 0.85] } else { [0.9, 0.6, 0.3] };
    let fade = 1.0 - (-6.0 * d.abs()).exp() * 0.5;
    let band = 0.85 + 0.15 * (d * std::f64::consts::TAU / 0.02).cos();
    let mut c = base.map(|x| x * fade * band);
    if d.abs() < 0.003 {
        c = [1.0; 3];
    }
    let b = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [b(c[0]), b(c[1]), b(c[2]), 255]
}

fn slice_points(z: f64, res: u32) -> Vec<[f64; 3]> {
    (0..res)
        .flat_map(|y| {
            (0..res).map(move |x| {
                [
                    (x as f64 + 0.5) / res as f64,
                    1.0 - (y as f64 + 0.5) / res as f64,
                    z,
                ]
            })
        })
        .collect()
}

/// Fits an analytic SDF and shows z-slices of the learned field.
#[wasm_bindgen]
pub struct SdfSlice {
    trainer: Trainer,
    shape: Shape,
}

impl SdfSlice {
    fn create(shape: &str, seed: u64) -> gnf_core::Result<Self> {
        let shape = demo_shape(shape)
            .ok_or_else(|| gnf_core::Error::InvalidConfig(format!("unknown shape {shape:?}, use sphere or torus")))?;
        let grid = GridConfig {
            dim: 3,
            levels: 12,
            n_min: 4,
            n_max: 128,
            features_per_level: 1,
            log2_table_size: 15,
            init_scale: 1e-4,
        };
        Ok(Self {
            trainer: Trainer::new(Task::Sdf, grid, seed)?,
            shape,
        })
    }

    fn run(&mut self, steps: usize, batch: usize) -> gnf_core::Result<f64> {
        let t = &mut self.trainer;
        let loss = Loss::ScaledL1 { eps: 0.01, clamp: 0.1 };
        let mut value = f64::NAN;
        for _ in 0..steps {
            let b = sample_sdf_points(&self.shape, batch, &mut t.rng)?;
            value = train_step(&mut t.model, &b, &loss, &mut t.opt, &mut t.grads, t.step)?;
            t.step += 1;
        }
        Ok(value)
    }

    fn learned(&self, z: f64, res: u32, levels: usize) -> gnf_core::Result<Vec<f64>> {
        let m = &self.trainer.model;
        let pts: Vec<f32> = slice_points(z, res)
            .iter()
            .flat_map(|p| p.map(|x| x as f32))
            .collect();
        Ok(m.query_levels(&pts, levels.clamp(1, m.levels()))?
            .iter()
            .map(|&v| v as f64)
            .collect())
    }
}

#[wasm_bindgen]
impl SdfSlice {
    /// `shape` is `"sphere"` or `"torus"`.
    #[wasm_bindgen(constructor)]
    pub fn new(shape: &str, seed: u32) -> Result<SdfSlice, JsError> {
        Self::create(shape, seed as u64).map_err(js_err)
    }

    pub fn train(&mut self, steps: usize, batch: usize) -> Result<f64, JsError> {
        self.run(steps, batch).map_err(js_err)
    }

    pub fn step(&self) -> usize {
        self.trainer.step
    }

    pub fn levels(&self) -> usize {
        self.trainer.model.levels()
    }

    /// RGBA image of the learned field at height `z`, `res` pixels square.
    pub fn slice(&self, z: f64, res: u32, levels: usize) -> Result<Vec<u8>, JsError> {
        let d = self.learned(z, res, levels).map_err(js_err)?;
        Ok(d.into_iter().flat_map(sdf_color).collect())
    }

    /// The same slice of the analytic target.
    pub fn truth(&self, z: f64, res: u32) -> Vec<u8> {
        slice_points(z, res)
            .into_iter()
            .flat_map(|p| sdf_color(self.shape.sdf(p)))
            .collect()
    }
}

/// Forward and total FLOPs of both decoders plus the RBF/MLP total ratio:
/// `[rbf_forward, rbf_total, mlp_forward, mlp_total, ratio]`.
#[wasm_bindgen]
pub fn flop_counts(features: u32, width: u32, batch: u32) -> Vec<f64> {
    let (f, w, b) = (features as u64, width as u64, batch as u64);
    let rbf = [flops_rbf(f, w, b, FlopMode::Forward), flops_rbf(f, w, b, FlopMode::Total)];
    let mlp = [flops_mlp(f, w, b, FlopMode::Forward), flops_mlp(f, w, b, FlopMode::Total)];
    let ratio = if mlp[1] == 0 { f64::NAN } else { rbf[1] as f64 / mlp[1] as f64 };
    vec![rbf[0] as f64, rbf[1] as f64, mlp[0] as f64, mlp[1] as f64, ratio]
}
