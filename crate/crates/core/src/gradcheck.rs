//! Finite-difference checks of the hand-derived gradients in 64-bit
//! arithmetic: decoder only, encoder only, and loss through both.

use serde::Serialize;

use crate::error::Result;
use crate::grid::{FeatureGrid, GridConfig, TableGrad};
use crate::model::{CenterInit, FieldModel, Task};
use crate::numerics::{finite_diff_grad, rel_error, Rng};
use crate::rbf::{DecoderConfig, DecoderGrad, GaussianRbfLayer, KernelMode};
use crate::training::{loss_and_grad, GradBuffer, Loss, TrainBatch};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            tolerance: 1e-4,
            step: 1e-6,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorstParam {
    pub instance: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub worst: Option<WorstParam>,
    pub passed: bool,
}

struct Tally<'a> {
    cfg: &'a GradcheckConfig,
    checked: usize,
    worst: Option<WorstParam>,
}

impl Tally<'_> {
    fn record(&mut self, instance: usize, param: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = rel_error(analytic, numeric, self.cfg.floor);
        if self.worst.as_ref().is_none_or(|w| e > w.rel_error) {
            self.worst = Some(WorstParam {
                instance,
                param: param(),
                analytic,
                numeric,
                rel_error: e,
            });
        }
    }

    fn finish(self, suite: &'static str) -> SuiteResult {
        let passed = self
            .worst
            .as_ref()
            .is_some_and(|w| w.rel_error <= self.cfg.tolerance);
        SuiteResult {
            suite,
            instances: self.cfg.instances,
            checked: self.checked,
            worst: self.worst,
            passed,
        }
    }
}

fn random_layer(rng: &mut Rng, n: usize, m: usize, q: usize, mode: KernelMode) -> Result<GaussianRbfLayer<f64>> {
    let mut layer = GaussianRbfLayer::zeros(n, m, q, mode)?;
    let (c, r, w) = layer.raw_mut();
    c.iter_mut().for_each(|x| *x = rng.uniform_in(-1.0, 1.0));
    r.iter_mut().for_each(|x| *x = rng.uniform_in(-1.0, 0.5));
    w.iter_mut().for_each(|x| *x = rng.uniform_in(-1.0, 1.0));
    Ok(layer)
}

fn tiny_grid_config(rng: &mut Rng, dim: usize) -> GridConfig {
    GridConfig {
        dim,
        levels: 2,
        n_min: 2,
        n_max: 5 + rng.index(4) as u32,
        features_per_level: 1 + rng.index(2),
        // small enough that the finer level is hashed
        log2_table_size: 5,
        init_scale: 0.5,
    }
}

/// `Σ u · decode(F)` checked against every parameter and every input.
pub fn check_decoder(cfg: &GradcheckConfig) -> Result<SuiteResult> {
    let mut tally = Tally {
        cfg,
        checked: 0,
        worst: None,
    };
    let root = Rng::new(cfg.seed).substream("decoder");
    for inst in 0..cfg.instances {
        let mut rng = root.substream(&inst.to_string());
        let m = 2 + rng.index(3);
        let q = [1, 3][inst % 2];
        let mode = [KernelMode::Spherical, KernelMode::Anisotropic][(inst / 2) % 2];
        let layer = random_layer(&mut rng, 4, m, q, mode)?;
        let rows = 3;
        let feats: Vec<f64> = (0..rows * m).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let up: Vec<f64> = (0..rows * q).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let objective = |l: &GaussianRbfLayer<f64>, f: &[f64]| -> f64 {
            let out = l.decode_batch(f, m).expect("valid batch");
            out.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let mut g = DecoderGrad::zeros_like(&layer);
        let gf = layer.decoder_backward(&feats, &up, &mut g)?;
        let (c0, r0, w0) = layer.raw();
        let groups: [(&str, &[f64], &[f64]); 3] =
            [("center", c0, &g.centers), ("log_bandwidth", r0, &g.log_bandwidth), ("weight", w0, &g.weights)];
        for (gi, (name, values, analytic)) in groups.into_iter().enumerate() {
            let fd = finite_diff_grad(
                |th| {
                    let mut l = layer.clone();
                    let (c, r, w) = l.raw_mut();
                    [c, r, w][gi].copy_from_slice(th);
                    objective(&l, &feats)
                },
                values,
                cfg.step,
            )?;
            for i in 0..values.len() {
                tally.record(inst, || format!("{name}[{i}]"), analytic[i], fd[i]);
            }
        }
        let fd = finite_diff_grad(|f| objective(&layer, f), &feats, cfg.step)?;
        for i in 0..feats.len() {
            tally.record(inst, || format!("input[{i}]"), gf[i], fd[i]);
        }
    }
    Ok(tally.finish("decoder"))
}

/// `Σ U · encode(P)` checked against every table entry.
pub fn check_encoder(cfg: &GradcheckConfig) -> Result<SuiteResult> {
    let mut tally = Tally {
        cfg,
        checked: 0,
        worst: None,
    };
    let root = Rng::new(cfg.seed).substream("encoder");
    for inst in 0..cfg.instances {
        let mut rng = root.substream(&inst.to_string());
        let dim = 2 + inst % 2;
        let gcfg = tiny_grid_config(&mut rng, dim);
        let grid = FeatureGrid::<f64>::new(gcfg, &mut rng)?;
        let rows = 4;
        let pts: Vec<f64> = (0..rows * dim).map(|_| rng.uniform()).collect();
        let up: Vec<f64> = (0..rows * grid.feature_dim())
            .map(|_| rng.uniform_in(-1.0, 1.0))
            .collect();
        let mut g = TableGrad::for_grid(&grid);
        grid.encoder_backward(&pts, &up, &mut g)?;
        let fd = finite_diff_grad(
            |th| {
                let mut gr = grid.clone();
                gr.params_mut().copy_from_slice(th);
                let f = gr.encode_batch(&pts).expect("valid batch");
                f.iter().zip(&up).map(|(a, b)| a * b).sum()
            },
            grid.params(),
            cfg.step,
        )?;
        for i in 0..fd.len() {
            tally.record(inst, || format!("table[{i}]"), g.values()[i], fd[i]);
        }
    }
    Ok(tally.finish("encoder"))
}

/// Training loss through encoder and decoder, checked on 10 touched table
/// entries and 10 decoder parameters per instance. SDF instances use the
/// scaled L1 loss, image instances the squared error.
pub fn check_end_to_end(cfg: &GradcheckConfig) -> Result<SuiteResult> {
    let mut tally = Tally {
        cfg,
        checked: 0,
        worst: None,
    };
    let root = Rng::new(cfg.seed).substream("end-to-end");
    for inst in 0..cfg.instances {
        let mut rng = root.substream(&inst.to_string());
        let task = [Task::Sdf, Task::Image][inst % 2];
        let dim = if task == Task::Image { 2 } else { 3 };
        let gcfg = tiny_grid_config(&mut rng, dim);
        let mode = [KernelMode::Spherical, KernelMode::Anisotropic][(inst / 2) % 2];
        let dec = DecoderConfig { kernels: 4, mode };
        let mut model = FieldModel::<f64>::new(task, gcfg, &dec, CenterInit::Features, &rng.substream("model"))?;
        model.decoder = random_layer(&mut rng, 4, model.grid.feature_dim(), task.out_dim(), mode)?;
        let rows = 6;
        let q = task.out_dim();
        let pts: Vec<f64> = (0..rows * dim).map(|_| rng.uniform()).collect();
        let pred = model.query(&pts)?;
        // targets well away from the predictions so the L1 kink is not crossed
        let targets: Vec<f64> = pred
            .iter()
            .map(|p| {
                let off = rng.uniform_in(0.02, 0.08);
                if rng.uniform() < 0.5 { p + off } else { p - off }
            })
            .collect();
        let batch = TrainBatch::new(dim, q, pts, targets)?;
        let loss = match task {
            Task::Sdf => Loss::ScaledL1 { eps: 0.01, clamp: 10.0 },
            _ => Loss::L2,
        };
        let value = |m: &FieldModel<f64>| -> f64 {
            let mut g = GradBuffer::new(m);
            loss_and_grad(m, &batch, &loss, &mut g).expect("valid batch")
        };
        let mut grads = GradBuffer::new(&model);
        loss_and_grad(&model, &batch, &loss, &mut grads)?;
        let touched = grads.table.touched().to_vec();
        for k in 0..10 {
            let idx = touched[rng.index(touched.len())] as usize;
            let fd = finite_diff_grad(
                |th| {
                    let mut m = model.clone();
                    m.grid.params_mut()[idx] = th[0];
                    value(&m)
                },
                &[model.grid.params()[idx]],
                cfg.step,
            )?[0];
            tally.record(inst, || format!("table[{idx}] (draw {k})"), grads.table.values()[idx], fd);
        }
        for k in 0..10 {
            let gi = k % 3;
            let (c, r, w) = model.decoder.raw();
            let len = [c.len(), r.len(), w.len()][gi];
            let i = rng.index(len);
            let start = [c, r, w][gi][i];
            let analytic = [&grads.decoder.centers, &grads.decoder.log_bandwidth, &grads.decoder.weights][gi][i];
            let fd = finite_diff_grad(
                |th| {
                    let mut m = model.clone();
                    let (c, r, w) = m.decoder.raw_mut();
                    [c, r, w][gi][i] = th[0];
                    value(&m)
                },
                &[start],
                cfg.step,
            )?[0];
            let name = ["center", "log_bandwidth", "weight"][gi];
            tally.record(inst, || format!("{name}[{i}]"), analytic, fd);
        }
    }
    Ok(tally.finish("end-to-end"))
}

/// All three suites.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<SuiteResult>> {
    Ok(vec![check_decoder(cfg)?, check_encoder(cfg)?, check_end_to_end(cfg)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        let res = run_gradcheck(&GradcheckConfig::default()).unwrap();
        for r in &res {
            eprintln!("{} {} {:?}", r.suite, r.checked, r.worst);
            assert!(r.passed, "{r:?}");
            assert!(r.checked >= 20 * 10);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let cfg = GradcheckConfig::default();
        let mut t = Tally {
            cfg: &cfg,
            checked: 0,
            worst: None,
        };
        t.record(0, || "a".into(), 1.0, 1.0);
        t.record(1, || "b".into(), 1.0, 1.001);
        let r = t.finish("x");
        assert!(!r.passed);
        assert_eq!(r.worst.unwrap().param, "b");
    }
}
