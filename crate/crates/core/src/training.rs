//! Losses, samplers and the optimization loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::TableGrad;
use crate::image::ImageBuffer;
use crate::model::FieldModel;
use crate::numerics::{adam_step, adam_step_sparse, lr_schedule, AdamConfig, AdamState, LrSchedule, Real, Rng};
use crate::par::map_chunks;
use crate::rbf::DecoderGrad;
use crate::sdf::SdfOracle;

/// Rows per work unit. Fixed so reductions do not depend on the worker count.
pub const CHUNK_ROWS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub dim: usize,
    pub out_dim: usize,
    /// `B x dim`, inside the unit cube.
    pub points: Vec<T>,
    /// `B x out_dim`.
    pub targets: Vec<T>,
    /// Per-sample loss weights.
    pub weights: Vec<T>,
}

impl<T: Real> TrainBatch<T> {
    /// Batch with unit weights.
    pub fn new(dim: usize, out_dim: usize, points: Vec<T>, targets: Vec<T>) -> Result<Self> {
        let b = points.len() / dim.max(1);
        let batch = Self {
            dim,
            out_dim,
            points,
            targets,
            weights: vec![T::one(); b],
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.weights.len();
        if b == 0 {
            return Err(Error::InvalidConfig("training batch is empty".into()));
        }
        check_len("batch points", b * self.dim, self.points.len())?;
        check_len("batch targets", b * self.out_dim, self.targets.len())?;
        let finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !finite(&self.points) || !finite(&self.targets) || !finite(&self.weights) {
            return Err(Error::NonFinite {
                what: "training batch".into(),
            });
        }
        if self.weights.iter().any(|w| *w < T::zero()) {
            return Err(Error::OutOfRange {
                what: "sample weight",
                value: "negative".into(),
                allowed: ">= 0".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Loss {
    /// `|pred - gt| / (|gt| + eps)` with targets clamped to `[-clamp, clamp]`.
    ScaledL1 { eps: f64, clamp: f64 },
    /// Squared Euclidean residual.
    L2,
}

impl Loss {
    /// Loss of one row and its gradient, written into `grad`.
    #[inline]
    fn row<T: Real>(&self, pred: &[T], gt: &[T], scale: f64, grad: &mut [T]) -> f64 {
        match *self {
            Loss::ScaledL1 { eps, clamp } => {
                let mut total = 0.0;
                for k in 0..pred.len() {
                    let g = gt[k].as_f64().clamp(-clamp, clamp);
                    let (l, d) = scaled_l1_term(pred[k].as_f64(), g, eps);
                    total += scale * l;
                    grad[k] = T::lit(scale * d);
                }
                total
            }
            Loss::L2 => {
                let mut total = 0.0;
                for k in 0..pred.len() {
                    let r = pred[k].as_f64() - gt[k].as_f64();
                    total += scale * r * r;
                    grad[k] = T::lit(scale * 2.0 * r);
                }
                total
            }
        }
    }
}

#[inline]
fn scaled_l1_term(pred: f64, gt: f64, eps: f64) -> (f64, f64) {
    let s = 1.0 / (gt.abs() + eps);
    let r = pred - gt;
    let d = if r > 0.0 {
        s
    } else if r < 0.0 {
        -s
    } else {
        0.0
    };
    (r.abs() * s, d)
}

/// Mean of `|pred - gt| / (|gt| + eps)` and its gradient.
pub fn sdf_loss<T: Real>(pred: &[T], gt: &[T], eps: f64) -> Result<(f64, Vec<T>)> {
    check_len("sdf prediction", gt.len(), pred.len())?;
    if !(eps > 0.0) {
        return Err(Error::OutOfRange {
            what: "epsilon",
            value: eps.to_string(),
            allowed: "> 0".into(),
        });
    }
    let b = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let (l, d) = scaled_l1_term(p.as_f64(), g.as_f64(), eps);
        loss += l;
        grad.push(T::lit(d / b));
    }
    Ok((loss / b, grad))
}

/// Mean over samples of the squared RGB residual and its gradient.
pub fn rgb_loss<T: Real>(pred: &[T], gt: &[T]) -> Result<(f64, Vec<T>)> {
    check_len("rgb prediction", gt.len(), pred.len())?;
    if pred.len() % 3 != 0 {
        return Err(Error::ShapeMismatch {
            what: "rgb prediction",
            expected: pred.len() / 3 * 3,
            got: pred.len(),
        });
    }
    let b = (pred.len() / 3).max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        let r = p.as_f64() - g.as_f64();
        loss += r * r;
        grad.push(T::lit(2.0 * r / b));
    }
    Ok((loss / b, grad))
}

/// Standard deviations of the two perturbed shells around the surface.
pub const SURFACE_NOISE: [f64; 2] = [0.05, 0.005];

/// `P` training points: 40% on the surface, 40% perturbed surface points and
/// 20% uniform in the unit cube, in that order. Targets are exact distances.
pub fn sample_sdf_points<T: Real>(
    oracle: &dyn SdfOracle,
    count: usize,
    rng: &mut Rng,
) -> Result<TrainBatch<T>> {
    if count < 5 {
        return Err(Error::OutOfRange {
            what: "sample count",
            value: count.to_string(),
            allowed: ">= 5".into(),
        });
    }
    let n_surface = count * 2 / 5;
    let n_perturbed = count * 2 / 5;
    let n_uniform = count - n_surface - n_perturbed;
    let mut points = Vec::with_capacity(count * 3);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..n_surface {
        let p = oracle.sample_surface(rng);
        points.extend(p.iter().map(|&x| T::lit(x)));
        targets.push(T::zero());
    }
    for i in 0..n_perturbed {
        let std = SURFACE_NOISE[usize::from(i >= n_perturbed / 2)];
        let s = oracle.sample_surface(rng);
        let mut p = [0.0; 3];
        for j in 0..3 {
            p[j] = (s[j] + std * rng.normal()).clamp(0.0, 1.0);
        }
        points.extend(p.iter().map(|&x| T::lit(x)));
        targets.push(T::lit(oracle.sdf(p)));
    }
    for _ in 0..n_uniform {
        let p = [rng.uniform(), rng.uniform(), rng.uniform()];
        points.extend(p.iter().map(|&x| T::lit(x)));
        targets.push(T::lit(oracle.sdf(p)));
    }
    TrainBatch::new(3, 1, points, targets)
}

/// `count` pixels drawn uniformly with replacement; points are pixel centers.
pub fn sample_pixels<T: Real>(image: &ImageBuffer, count: usize, rng: &mut Rng) -> Result<TrainBatch<T>> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidConfig("image is empty".into()));
    }
    let (w, h) = (image.width as usize, image.height as usize);
    let mut points = Vec::with_capacity(count * 2);
    let mut targets = Vec::with_capacity(count * 3);
    for _ in 0..count {
        let idx = rng.index(w * h);
        let (x, y) = (idx % w, idx / w);
        points.push(T::lit((x as f64 + 0.5) / w as f64));
        points.push(T::lit((y as f64 + 0.5) / h as f64));
        targets.extend(image.data[idx * 3..idx * 3 + 3].iter().map(|&c| T::lit(c as f64)));
    }
    TrainBatch::new(2, 3, points, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub table_lr: f64,
    pub decoder_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            table_lr: 1e-2,
            decoder_lr: 1e-3,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            schedule: LrSchedule::default(),
        }
    }
}

impl OptimConfig {
    /// Copy with the schedule resolved for a run of `total` steps.
    pub fn for_run(&self, total: usize) -> Self {
        Self {
            schedule: self.schedule.for_run(total),
            ..self.clone()
        }
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.table_lr > 0.0
            && self.decoder_lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.schedule.decay_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

/// Adam state for every trainable array of a [`FieldModel`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    pub table: AdamState<T>,
    pub centers: AdamState<T>,
    pub log_bandwidth: AdamState<T>,
    pub weights: AdamState<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(model: &FieldModel<T>, config: OptimConfig) -> Result<Self> {
        config.validate()?;
        let (c, r, w) = model.decoder.raw();
        Ok(Self {
            table: AdamState::new(model.grid.params().len(), config.adam(config.table_lr)),
            centers: AdamState::new(c.len(), config.adam(config.decoder_lr)),
            log_bandwidth: AdamState::new(r.len(), config.adam(config.decoder_lr)),
            weights: AdamState::new(w.len(), config.adam(config.decoder_lr)),
            config,
        })
    }

    /// Sets the learning rates for `step` from the schedule. Returns the
    /// table rate.
    pub fn schedule(&mut self, step: usize) -> f64 {
        let f = lr_schedule(step, 1.0, &self.config.schedule);
        let dec = self.config.decoder_lr * f;
        self.table.lr = self.config.table_lr * f;
        self.centers.lr = dec;
        self.log_bandwidth.lr = dec;
        self.weights.lr = dec;
        self.table.lr
    }
}

/// Gradient accumulators mirroring every trainable parameter.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub table: TableGrad<T>,
    pub decoder: DecoderGrad<T>,
}

impl<T: Real> GradBuffer<T> {
    pub fn new(model: &FieldModel<T>) -> Self {
        Self {
            table: TableGrad::for_grid(&model.grid),
            decoder: DecoderGrad::zeros_like(&model.decoder),
        }
    }

    pub fn clear(&mut self) {
        self.table.clear();
        self.decoder.clear();
    }

    pub fn max_abs(&self) -> f64 {
        self.table.max_abs().max(self.decoder.max_abs())
    }
}

/// Applies one Adam step to every parameter group: sparse on tables, dense
/// on the decoder.
pub fn apply_gradients<T: Real>(
    model: &mut FieldModel<T>,
    grads: &GradBuffer<T>,
    opt: &mut Optimizer<T>,
) -> Result<()> {
    adam_step_sparse(
        model.grid.params_mut(),
        grads.table.values(),
        grads.table.touched(),
        &mut opt.table,
    )?;
    let (c, r, w) = model.decoder.raw_mut();
    adam_step(c, &grads.decoder.centers, &mut opt.centers)?;
    adam_step(r, &grads.decoder.log_bandwidth, &mut opt.log_bandwidth)?;
    adam_step(w, &grads.decoder.weights, &mut opt.weights)?;
    Ok(())
}

/// Loss and gradients of `batch` under `model`, accumulated into `grads`.
///
/// The loss is the weighted mean over rows. Work fans out over fixed-size
/// chunks and is merged in chunk order, so the result is independent of the
/// worker count.
pub fn loss_and_grad<T: Real>(
    model: &FieldModel<T>,
    batch: &TrainBatch<T>,
    loss: &Loss,
    grads: &mut GradBuffer<T>,
) -> Result<f64> {
    check_len("batch dimension", model.dim(), batch.dim)?;
    check_len("batch outputs", model.out_dim(), batch.out_dim)?;
    let b = batch.len();
    let (d, q, m) = (batch.dim, batch.out_dim, model.grid.feature_dim());
    let inv_b = 1.0 / b as f64;
    let chunks = b.div_ceil(CHUNK_ROWS);
    let parts = map_chunks(chunks, |c| -> Result<(f64, DecoderGrad<T>, Vec<T>)> {
        let lo = c * CHUNK_ROWS;
        let hi = (lo + CHUNK_ROWS).min(b);
        let feats = model.grid.encode_batch(&batch.points[lo * d..hi * d])?;
        let mut g = DecoderGrad::zeros_like(&model.decoder);
        let (l, gf) = model.decoder.forward_backward(&feats, &mut g, |r, out, up| {
            let row = lo + r;
            let scale = batch.weights[row].as_f64() * inv_b;
            loss.row(out, &batch.targets[row * q..(row + 1) * q], scale, up)
        });
        Ok((l, g, gf))
    });
    let mut total = 0.0;
    let mut feat_grad = Vec::with_capacity(b * m);
    for part in parts {
        let (l, g, gf) = part?;
        total += l;
        grads.decoder.accumulate(&g);
        feat_grad.extend_from_slice(&gf);
    }
    model.grid.encoder_backward(&batch.points, &feat_grad, &mut grads.table)?;
    Ok(total)
}

/// One optimization step. Returns the loss before the update.
pub fn train_step<T: Real>(
    model: &mut FieldModel<T>,
    batch: &TrainBatch<T>,
    loss: &Loss,
    opt: &mut Optimizer<T>,
    grads: &mut GradBuffer<T>,
    step: usize,
) -> Result<f64> {
    grads.clear();
    let value = loss_and_grad(model, batch, loss, grads)?;
    let max_grad = grads.max_abs();
    if !value.is_finite() || !max_grad.is_finite() {
        return Err(Error::TrainingAbort {
            step,
            loss: value,
            max_grad,
        });
    }
    opt.schedule(step);
    apply_gradients(model, grads, opt)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Offset in the scaled L1 loss.
    pub epsilon: f64,
    /// Magnitude at which SDF targets are clamped.
    pub sdf_clamp: f64,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Invoke the checkpoint callback every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self::sdf_default()
    }
}

impl FitConfig {
    /// 20k steps of 1600 freshly sampled points.
    pub fn sdf_default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 1600,
            epsilon: 0.01,
            sdf_clamp: 0.1,
            seed: 0,
            optim: OptimConfig::default(),
            checkpoint_every: 0,
        }
    }

    /// 10k steps of 2^14 pixels.
    pub fn image_default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 1 << 14,
            ..Self::sdf_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if !(self.sdf_clamp > 0.0) {
            return Err(Error::InvalidConfig("sdf_clamp must be > 0".into()));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let n = n.min(self.rows.len()).max(1);
        self.rows[self.rows.len().saturating_sub(n)..]
            .iter()
            .map(|r| r.loss)
            .sum::<f64>()
            / n as f64
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss,lr")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.lr)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }
}

/// Runs `config.steps` sample-then-step iterations.
///
/// `sampler(step, rng)` produces each batch from the `"batches"` substream of
/// the config seed. `on_checkpoint(step, model)` runs every
/// `checkpoint_every` steps, counted after the update.
pub fn fit<T, S, C>(
    model: &mut FieldModel<T>,
    mut sampler: S,
    loss: &Loss,
    config: &FitConfig,
    mut on_checkpoint: C,
) -> Result<History>
where
    T: Real,
    S: FnMut(usize, &mut Rng) -> Result<TrainBatch<T>>,
    C: FnMut(usize, &FieldModel<T>) -> Result<()>,
{
    config.validate()?;
    let mut opt = Optimizer::new(model, config.optim.for_run(config.steps))?;
    let mut grads = GradBuffer::new(model);
    let mut rng = Rng::new(config.seed).substream("batches");
    let mut history = History::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let batch = sampler(step, &mut rng)?;
        let value = train_step(model, &batch, loss, &mut opt, &mut grads, step)?;
        history.rows.push(HistoryRow {
            step,
            loss: value,
            lr: opt.table.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(history)
}
