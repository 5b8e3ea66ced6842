//! Run configuration files: strict JSON, every section optional except the
//! task, defaults filled in per task.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::model::{CenterInit, Task};
use crate::radiance::RadianceFitConfig;
use crate::rbf::{DecoderConfig, KernelMode};
use crate::sdf::Shape;
use crate::training::FitConfig;

/// Inputs and outputs of a run. Which inputs are needed depends on the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Analytic SDF target.
    pub shape: Option<Shape>,
    /// Mesh SDF target (OBJ or PLY); used when `shape` is absent.
    pub mesh: Option<PathBuf>,
    /// Image to fit (PNG or PPM).
    pub image: Option<PathBuf>,
    /// Toy radiance scene (JSON); the built-in two-sphere scene when absent.
    pub scene: Option<PathBuf>,
    /// Directory for the checkpoint, loss history and summary.
    pub out_dir: Option<PathBuf>,
}

/// Writes `given` over `base`, recursing into objects present in both.
fn overlay(base: &mut serde_json::Value, given: serde_json::Value) {
    match (base, given) {
        (serde_json::Value::Object(b), serde_json::Value::Object(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Defaults per task; for images `n_max` follows the longest side.
    #[serde(default)]
    pub encoder: Option<GridConfig>,
    #[serde(default)]
    pub decoder: Option<DecoderConfig>,
    #[serde(default = "default_center_init")]
    pub center_init: CenterInit,
    /// SDF and image training.
    #[serde(default)]
    pub fit: Option<FitConfig>,
    /// Radiance training.
    #[serde(default)]
    pub radiance_fit: Option<RadianceFitConfig>,
    /// Added to the raw density before the softplus.
    #[serde(default)]
    pub density_shift: Option<f64>,
    #[serde(default)]
    pub io: IoConfig,
}

fn default_center_init() -> CenterInit {
    CenterInit::Features
}

impl RunConfig {
    /// Defaults for `task` with no inputs set.
    pub fn new(task: Task) -> Self {
        Self {
            task,
            seed: 0,
            encoder: None,
            decoder: None,
            center_init: CenterInit::Features,
            fit: None,
            radiance_fit: None,
            density_shift: None,
            io: IoConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::InvalidConfig(e.to_string());
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        // partial training sections are completed from the task's defaults
        let defaults = match value.get("task").and_then(|t| t.as_str()) {
            Some("sdf") => Some(("fit", serde_json::to_value(FitConfig::sdf_default()))),
            Some("image") => Some(("fit", serde_json::to_value(FitConfig::image_default()))),
            Some("radiance") => Some(("radiance_fit", serde_json::to_value(RadianceFitConfig::default()))),
            _ => None,
        };
        if let Some((key, full)) = defaults {
            if let Some(given) = value.get_mut(key).filter(|v| v.is_object()) {
                let mut full = full.map_err(bad)?;
                overlay(&mut full, std::mem::take(given));
                *given = full;
            }
        }
        let cfg: Self = serde_json::from_value(value).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{name}: {m}")),
            other => Error::InvalidConfig(format!("{name}: {other}")),
        };
        if let Some(g) = &self.encoder {
            g.validate().map_err(|e| field("encoder", e))?;
            let want = if self.task == Task::Image { 2 } else { 3 };
            if g.dim != want {
                return Err(Error::InvalidConfig(format!(
                    "encoder.dim: {} task needs dim {want}, got {}",
                    self.task.name(),
                    g.dim
                )));
            }
        }
        let dec = self.decoder_config();
        if dec.kernels == 0 {
            return Err(Error::InvalidConfig("decoder.kernels: must be >= 1".into()));
        }
        match self.task {
            Task::Sdf | Task::Image => {
                if self.radiance_fit.is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "radiance_fit: not used by the {} task",
                        self.task.name()
                    )));
                }
                self.fit_config().validate().map_err(|e| field("fit", e))?;
            }
            Task::Radiance => {
                if self.fit.is_some() {
                    return Err(Error::InvalidConfig("fit: radiance runs use radiance_fit".into()));
                }
                self.radiance_fit_config()
                    .validate()
                    .map_err(|e| field("radiance_fit", e))?;
            }
        }
        if let Some(s) = self.density_shift {
            if !s.is_finite() {
                return Err(Error::InvalidConfig("density_shift: must be finite".into()));
            }
        }
        let io = &self.io;
        match self.task {
            Task::Sdf => {
                if let Some(shape) = &io.shape {
                    shape.validate().map_err(|e| field("io.shape", e))?;
                } else if io.mesh.is_none() {
                    return Err(Error::InvalidConfig("io: sdf task needs io.shape or io.mesh".into()));
                }
            }
            Task::Image => {
                if io.image.is_none() {
                    return Err(Error::InvalidConfig("io.image: required for the image task".into()));
                }
            }
            Task::Radiance => {}
        }
        Ok(())
    }

    /// Encoder settings; `image_side` is the longest side of the target image.
    pub fn grid_config(&self, image_side: Option<u32>) -> GridConfig {
        if let Some(g) = &self.encoder {
            return g.clone();
        }
        match self.task {
            Task::Sdf => GridConfig::sdf_default(),
            Task::Image => GridConfig::image_default(image_side.unwrap_or(512)),
            Task::Radiance => GridConfig::radiance_default(),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        self.decoder.clone().unwrap_or(DecoderConfig {
            kernels: 64,
            mode: match self.task {
                Task::Radiance => KernelMode::Anisotropic,
                _ => KernelMode::Spherical,
            },
        })
    }

    /// Fit settings with the run seed applied.
    pub fn fit_config(&self) -> FitConfig {
        let mut f = self.fit.clone().unwrap_or_else(|| match self.task {
            Task::Image => FitConfig::image_default(),
            _ => FitConfig::sdf_default(),
        });
        f.seed = self.seed;
        f
    }

    pub fn radiance_fit_config(&self) -> RadianceFitConfig {
        let mut f = self.radiance_fit.clone().unwrap_or_default();
        f.seed = self.seed;
        f
    }

    pub fn density_shift(&self) -> f64 {
        self.density_shift.unwrap_or(match self.task {
            Task::Radiance => crate::radiance::DEFAULT_DENSITY_SHIFT,
            _ => 0.0,
        })
    }
}
