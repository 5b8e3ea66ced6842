//! Closed-form FLOP counts, instrumented counts and decoder throughput for
//! the RBF decoder against a reference two-hidden-layer MLP.
//!
//! One FLOP is one scalar multiply, add, subtract or transcendental call.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::numerics::{Real, Rng};
use crate::rbf::{FlopCount, GaussianRbfLayer, KernelMode, OpCounter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FlopMode {
    Forward,
    /// Forward plus backward.
    Total,
}

/// `2(Fw + w² + w)B` forward, three times that in total.
pub fn flops_mlp(f: u64, w: u64, b: u64, mode: FlopMode) -> u64 {
    let fwd = 2 * (f * w + w * w + w) * b;
    match mode {
        FlopMode::Forward => fwd,
        FlopMode::Total => 3 * fwd,
    }
}

/// `(3F + 3)BN` forward, `(7F + 6)BN` in total.
pub fn flops_rbf(f: u64, n: u64, b: u64, mode: FlopMode) -> u64 {
    match mode {
        FlopMode::Forward => (3 * f + 3) * b * n,
        FlopMode::Total => (7 * f + 6) * b * n,
    }
}

/// Published counts at `F = 32`, `w = N = 64`, `B = 10^4`.
pub mod published {
    pub const F: u64 = 32;
    pub const WIDTH: u64 = 64;
    pub const B: u64 = 10_000;
    pub const MLP_FORWARD: f64 = 126.7e6;
    pub const MLP_TOTAL: f64 = 380.2e6;
    pub const RBF_FORWARD: f64 = 69.1e6;
    pub const RBF_TOTAL: f64 = 192.0e6;
}

/// Rectifier MLP `F -> w -> w -> q` used only as a benchmark baseline.
#[derive(Clone, Debug)]
pub struct RefMlp<T> {
    widths: [usize; 4],
    /// `(weights out x in, biases)` per layer.
    layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> RefMlp<T> {
    /// He-uniform weights, zero biases.
    pub fn new(f: usize, w: usize, q: usize, rng: &mut Rng) -> Result<Self> {
        if f == 0 || w == 0 || q == 0 {
            return Err(Error::InvalidConfig("MLP widths must be >= 1".into()));
        }
        let widths = [f, w, w, q];
        let layers = widths
            .windows(2)
            .map(|p| {
                let a = (6.0 / p[0] as f64).sqrt();
                let wts = (0..p[0] * p[1]).map(|_| T::lit(rng.uniform_in(-a, a))).collect();
                (wts, vec![T::zero(); p[1]])
            })
            .collect();
        Ok(Self { widths, layers })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    /// Row-wise forward pass of a `B x F` batch.
    pub fn forward_batch(&self, x: &[T]) -> Result<Vec<T>> {
        self.forward_batch_counted(x, &mut ())
    }

    /// Forward pass that tallies one multiply and one add per weight.
    /// Bias additions and rectifiers are not counted, matching `flops_mlp`.
    pub fn forward_batch_counted<C: OpCounter>(&self, x: &[T], counter: &mut C) -> Result<Vec<T>> {
        let f = self.widths[0];
        check_len("MLP batch", x.len() / f * f, x.len())?;
        let rows = x.len() / f;
        let q = self.widths[3];
        let hidden = self.widths[1];
        let mut out = vec![T::zero(); rows * q];
        let mut a = vec![T::zero(); hidden];
        let mut b = vec![T::zero(); hidden];
        for (xi, oi) in x.chunks_exact(f).zip(out.chunks_exact_mut(q)) {
            dense(&self.layers[0], xi, &mut a, true, counter);
            dense(&self.layers[1], &a, &mut b, true, counter);
            dense(&self.layers[2], &b, oi, false, counter);
        }
        Ok(out)
    }
}

#[inline]
fn dense<T: Real, C: OpCounter>(layer: &(Vec<T>, Vec<T>), x: &[T], y: &mut [T], relu: bool, counter: &mut C) {
    let n = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &layer.0[o * n..(o + 1) * n];
        let mut acc = layer.1[o];
        for (w, xi) in row.iter().zip(x) {
            acc += *w * *xi;
        }
        *yo = if relu { acc.max(T::zero()) } else { acc };
    }
    counter.add(2 * (n * y.len()) as u64);
}

/// Measured forward count of an `F -> N -> 1` spherical RBF decoder on `B` points.
pub fn instrumented_rbf(f: usize, n: usize, b: usize, rng: &mut Rng) -> Result<u64> {
    let layer = GaussianRbfLayer::<f32>::init_random(n, f, 1, KernelMode::Spherical, rng)?;
    let x = random_batch::<f32>(b * f, rng);
    let mut count = FlopCount::default();
    layer.decode_batch_counted(&x, f, &mut count)?;
    Ok(count.ops)
}

/// Measured forward count of an `F -> w -> w -> 1` MLP on `B` points.
pub fn instrumented_mlp(f: usize, w: usize, b: usize, rng: &mut Rng) -> Result<u64> {
    let mlp = RefMlp::<f32>::new(f, w, 1, rng)?;
    let x = random_batch::<f32>(b * f, rng);
    let mut count = FlopCount::default();
    mlp.forward_batch_counted(&x, &mut count)?;
    Ok(count.ops)
}

fn random_batch<T: Real>(len: usize, rng: &mut Rng) -> Vec<T> {
    (0..len).map(|_| T::lit(rng.uniform_in(-1.0, 1.0))).collect()
}

/// Points per second over repeated timed runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Throughput {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub repeats: usize,
}

/// Times `run` (which processes `points` points) `repeats` times after
/// `warmup` untimed calls. Percentiles are nearest-rank.
pub fn measure_throughput<F>(mut run: F, points: usize, warmup: usize, repeats: usize) -> Result<Throughput>
where
    F: FnMut() -> Result<()>,
{
    if warmup < 3 {
        return Err(Error::OutOfRange {
            what: "warmup iterations",
            value: warmup.to_string(),
            allowed: ">= 3".into(),
        });
    }
    if repeats == 0 || points == 0 {
        return Err(Error::InvalidConfig("throughput needs repeats >= 1 and points >= 1".into()));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut rates = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        let s = t.elapsed().as_secs_f64().max(1e-9);
        rates.push(points as f64 / s);
    }
    rates.sort_by(f64::total_cmp);
    let rank = |p: f64| rates[((p * repeats as f64).ceil() as usize).clamp(1, repeats) - 1];
    Ok(Throughput {
        median: rank(0.5),
        p10: rank(0.1),
        p90: rank(0.9),
        repeats,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    pub model: &'static str,
    /// `formula`, `published` or `instrumented`.
    pub source: &'static str,
    pub forward: f64,
    pub backward: Option<f64>,
    pub total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub f: usize,
    pub width: usize,
    pub batch: usize,
    pub workers: usize,
    pub rows: Vec<FlopRow>,
    pub rbf: Option<Throughput>,
    pub mlp: Option<Throughput>,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub f: usize,
    /// MLP width and RBF kernel count.
    pub width: usize,
    pub batch: usize,
    pub warmup: usize,
    pub repeats: usize,
    /// Skip the timing runs.
    pub counts_only: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            f: published::F as usize,
            width: published::WIDTH as usize,
            batch: published::B as usize,
            warmup: 3,
            repeats: 10,
            counts_only: false,
            workers: 1,
            seed: 0,
        }
    }
}

/// Formula, published (when the configuration matches) and instrumented
/// counts for both decoders, plus throughput unless `counts_only`.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.f == 0 || cfg.width == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig("bench needs F, width and B >= 1".into()));
    }
    let (f, w, b) = (cfg.f as u64, cfg.width as u64, cfg.batch as u64);
    let rng = Rng::new(cfg.seed);
    let formula = |model, fwd: u64, tot: u64| FlopRow {
        model,
        source: "formula",
        forward: fwd as f64,
        backward: Some((tot - fwd) as f64),
        total: Some(tot as f64),
    };
    let mut rows = vec![
        formula("mlp", flops_mlp(f, w, b, FlopMode::Forward), flops_mlp(f, w, b, FlopMode::Total)),
        formula("rbf", flops_rbf(f, w, b, FlopMode::Forward), flops_rbf(f, w, b, FlopMode::Total)),
    ];
    if (f, w, b) == (published::F, published::WIDTH, published::B) {
        for (model, fwd, tot) in [
            ("mlp", published::MLP_FORWARD, published::MLP_TOTAL),
            ("rbf", published::RBF_FORWARD, published::RBF_TOTAL),
        ] {
            rows.push(FlopRow {
                model,
                source: "published",
                forward: fwd,
                backward: Some(tot - fwd),
                total: Some(tot),
            });
        }
    }
    let inst_mlp = instrumented_mlp(cfg.f, cfg.width, cfg.batch, &mut rng.substream("mlp"))?;
    let inst_rbf = instrumented_rbf(cfg.f, cfg.width, cfg.batch, &mut rng.substream("rbf"))?;
    for (model, fwd) in [("mlp", inst_mlp), ("rbf", inst_rbf)] {
        rows.push(FlopRow {
            model,
            source: "instrumented",
            forward: fwd as f64,
            backward: None,
            total: None,
        });
    }
    let (mut rbf_tp, mut mlp_tp) = (None, None);
    if !cfg.counts_only {
        let mut r = rng.substream("timing");
        let x = random_batch::<f32>(cfg.batch * cfg.f, &mut r);
        let layer = GaussianRbfLayer::<f32>::init_random(cfg.width, cfg.f, 1, KernelMode::Spherical, &mut r)?;
        let mlp = RefMlp::<f32>::new(cfg.f, cfg.width, 1, &mut r)?;
        rbf_tp = Some(measure_throughput(
            || layer.decode_batch(&x, cfg.f).map(|_| ()),
            cfg.batch,
            cfg.warmup,
            cfg.repeats,
        )?);
        mlp_tp = Some(measure_throughput(
            || mlp.forward_batch(&x).map(|_| ()),
            cfg.batch,
            cfg.warmup,
            cfg.repeats,
        )?);
    }
    Ok(BenchReport {
        f: cfg.f,
        width: cfg.width,
        batch: cfg.batch,
        workers: cfg.workers,
        rows,
        rbf: rbf_tp,
        mlp: mlp_tp,
    })
}

impl BenchReport {
    /// `total_rbf / total_mlp` for rows from `source`, when both exist.
    pub fn total_ratio(&self, source: &str) -> Option<f64> {
        let total = |model| {
            self.rows
                .iter()
                .find(|r| r.model == model && r.source == source)
                .and_then(|r| r.total)
        };
        Some(total("rbf")? / total("mlp")?)
    }

    /// Published RBF total over the closed-form MLP total.
    pub fn mixed_ratio(&self) -> Option<f64> {
        let total = |model, source| {
            self.rows
                .iter()
                .find(|r| r.model == model && r.source == source)
                .and_then(|r| r.total)
        };
        Some(total("rbf", "published")? / total("mlp", "formula")?)
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "model,source,F,width,B,workers,forward,backward,total,ratio_total_rbf_mlp,median_pts_s,p10_pts_s,p90_pts_s"
        )?;
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.0}")).unwrap_or_default();
            let ratio = match r.total {
                Some(_) => self.total_ratio(r.source).map(|x| format!("{x:.4}")).unwrap_or_default(),
                None => String::new(),
            };
            let tp = if r.source == "instrumented" {
                if r.model == "rbf" { self.rbf } else { self.mlp }
            } else {
                None
            };
            let tps = tp
                .map(|t| format!("{:.0},{:.0},{:.0}", t.median, t.p10, t.p90))
                .unwrap_or_else(|| ",,".into());
            writeln!(
                out,
                "{},{},{},{},{},{},{:.0},{},{},{},{}",
                r.model,
                r.source,
                self.f,
                self.width,
                self.batch,
                self.workers,
                r.forward,
                opt(r.backward),
                opt(r.total),
                ratio,
                tps
            )?;
        }
        Ok(())
    }

    /// Human-readable table in units of 10^6 FLOPs.
    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "F={} w=N={} B={} workers={}",
            self.f, self.width, self.batch, self.workers
        )?;
        writeln!(
            out,
            "{:<6} {:<13} {:>12} {:>12} {:>12}",
            "model", "source", "forward(M)", "backward(M)", "total(M)"
        )?;
        for r in &self.rows {
            let m = |v: Option<f64>| v.map(|x| format!("{:.2}", x / 1e6)).unwrap_or_else(|| "-".into());
            writeln!(
                out,
                "{:<6} {:<13} {:>12.2} {:>12} {:>12}",
                r.model,
                r.source,
                r.forward / 1e6,
                m(r.backward),
                m(r.total)
            )?;
        }
        for source in ["published", "formula"] {
            if let Some(x) = self.total_ratio(source) {
                writeln!(out, "total ratio rbf/mlp ({source}): {x:.3}")?;
            }
        }
        if let (Some(a), Some(b)) = (self.total_ratio("published"), self.total_ratio("formula")) {
            if (a - b).abs() > 5e-4 {
                writeln!(
                    out,
                    "note: published totals and closed-form totals differ ({a:.3} vs {b:.3})"
                )?;
            }
        }
        if let Some(x) = self.mixed_ratio() {
            writeln!(out, "total ratio rbf(published)/mlp(formula): {x:.4} (mixes sources)")?;
        }
        for (name, tp) in [("rbf", self.rbf), ("mlp", self.mlp)] {
            if let Some(t) = tp {
                writeln!(
                    out,
                    "{name} throughput: median {:.3e} pts/s (p10 {:.3e}, p90 {:.3e}, {} runs)",
                    t.median, t.p10, t.p90, t.repeats
                )?;
            }
        }
        Ok(())
    }
}
