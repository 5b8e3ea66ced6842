//! Whole runs from a [`RunConfig`]: load the target, build the model, train,
//! and score the result.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{load_image, psnr, render_image, ImageBuffer};
use crate::model::{FieldModel, Task};
use crate::numerics::Rng;
use crate::radiance::{fit_radiance, test_psnr, RadianceDataset, ToyScene};
use crate::sdf::{load_mesh, model_field, oracle_field, volumetric_iou, MeshOracle, SdfOracle};
use crate::training::{fit, sample_pixels, sample_sdf_points, History, Loss};

/// Resolution of the IoU reported after SDF runs.
pub const SUMMARY_IOU_RES: usize = 128;

/// What a run is fitted to.
pub enum Target {
    Sdf(Box<dyn SdfOracle>),
    Image(ImageBuffer),
    Radiance(RadianceDataset),
}

impl Target {
    pub fn task(&self) -> Task {
        match self {
            Target::Sdf(_) => Task::Sdf,
            Target::Image(_) => Task::Image,
            Target::Radiance(_) => Task::Radiance,
        }
    }
}

/// Reads or builds the target named by `cfg.io`.
pub fn load_target(cfg: &RunConfig) -> Result<Target> {
    cfg.validate()?;
    let io = &cfg.io;
    Ok(match cfg.task {
        Task::Sdf => match (&io.shape, &io.mesh) {
            (Some(shape), _) => Target::Sdf(Box::new(shape.clone())),
            (None, Some(path)) => Target::Sdf(Box::new(MeshOracle::new(load_mesh(path)?)?)),
            (None, None) => unreachable!("validated"),
        },
        Task::Image => {
            let path = io.image.as_ref().expect("validated");
            Target::Image(load_image(path)?)
        }
        Task::Radiance => {
            let scene = match &io.scene {
                Some(path) => ToyScene::load(path)?,
                None => ToyScene::two_spheres(),
            };
            Target::Radiance(scene.dataset()?)
        }
    })
}

/// Freshly initialized model for `cfg` and its target.
pub fn build_model(cfg: &RunConfig, target: &Target) -> Result<FieldModel<f32>> {
    if target.task() != cfg.task {
        return Err(Error::InvalidConfig(format!(
            "task {} does not match a {} target",
            cfg.task.name(),
            target.task().name()
        )));
    }
    let side = match target {
        Target::Image(img) => Some(img.width.max(img.height)),
        _ => None,
    };
    let mut model = FieldModel::new(
        cfg.task,
        cfg.grid_config(side),
        &cfg.decoder_config(),
        cfg.center_init,
        &Rng::new(cfg.seed).substream("init"),
    )?;
    model.density_shift = cfg.density_shift() as f32;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub task: &'static str,
    pub seed: u64,
    pub steps: usize,
    pub params: usize,
    pub train_seconds: f64,
    pub first_loss: Option<f64>,
    /// Mean of the last 100 losses.
    pub final_loss: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

pub struct RunOutcome {
    pub model: FieldModel<f32>,
    pub history: History,
    pub summary: RunSummary,
}

/// Trains a new model on `target`. `on_checkpoint(step, model)` runs at the
/// configured checkpoint interval.
pub fn run_fit<C>(cfg: &RunConfig, target: &Target, on_checkpoint: C) -> Result<RunOutcome>
where
    C: FnMut(usize, &FieldModel<f32>) -> Result<()>,
{
    let mut model = build_model(cfg, target)?;
    let start = Instant::now();
    let history = match target {
        Target::Sdf(oracle) => {
            let f = cfg.fit_config();
            let loss = Loss::ScaledL1 {
                eps: f.epsilon,
                clamp: f.sdf_clamp,
            };
            let oracle: &dyn SdfOracle = oracle.as_ref();
            fit(
                &mut model,
                |_, rng| sample_sdf_points(oracle, f.batch_size, rng),
                &loss,
                &f,
                on_checkpoint,
            )?
        }
        Target::Image(img) => {
            let f = cfg.fit_config();
            fit(
                &mut model,
                |_, rng| sample_pixels(img, f.batch_size, rng),
                &Loss::L2,
                &f,
                on_checkpoint,
            )?
        }
        Target::Radiance(data) => fit_radiance(&mut model, data, &cfg.radiance_fit_config(), on_checkpoint)?,
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let metrics = score(&model, target, cfg)?;
    let summary = RunSummary {
        task: cfg.task.name(),
        seed: cfg.seed,
        steps: history.len(),
        params: model.param_count(),
        train_seconds,
        first_loss: history.rows.first().map(|r| r.loss),
        final_loss: (!history.is_empty()).then(|| history.tail_mean(100)),
        metrics,
    };
    Ok(RunOutcome {
        model,
        history,
        summary,
    })
}

/// Task metrics of `model` against `target`:
/// IoU for SDFs, float and 8-bit PSNR for images, held-out PSNR for radiance.
pub fn score(model: &FieldModel<f32>, target: &Target, cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match target {
        Target::Sdf(oracle) => {
            let iou = volumetric_iou(
                &model_field(model, model.levels()),
                &oracle_field(oracle.as_ref()),
                SUMMARY_IOU_RES,
            )?;
            m.insert("iou".into(), iou);
        }
        Target::Image(img) => {
            let (out, stats) = render_image(model, img.width, img.height, model.levels())?;
            m.insert("psnr".into(), psnr(&out, img)?);
            m.insert("psnr_8bit".into(), psnr(&out.quantized(), img)?);
            m.insert("render_pixels_per_sec".into(), stats.pixels_per_sec);
        }
        Target::Radiance(data) => {
            let samples = cfg.radiance_fit_config().samples;
            m.insert("test_psnr".into(), test_psnr(model, data, samples)?);
        }
    }
    Ok(m)
}
