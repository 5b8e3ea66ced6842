//! Encoder and decoder composed into a field `f = h ∘ γ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridConfig};
use crate::numerics::{Real, Rng};
use crate::rbf::{DecoderConfig, GaussianRbfLayer, KernelMode};

/// Number of real spherical-harmonic coefficients per color channel.
pub const SH_COEFFS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sdf,
    Image,
    Radiance,
}

impl Task {
    /// Decoder outputs: signed distance, RGB, or density plus 3 x 16 SH coefficients.
    pub fn out_dim(self) -> usize {
        match self {
            Task::Sdf => 1,
            Task::Image => 3,
            Task::Radiance => 1 + 3 * SH_COEFFS,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Task::Sdf => 0,
            Task::Image => 1,
            Task::Radiance => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Task::Sdf),
            1 => Ok(Task::Image),
            2 => Ok(Task::Radiance),
            other => Err(Error::format("checkpoint", format!("unknown task tag {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Sdf => "sdf",
            Task::Image => "image",
            Task::Radiance => "radiance",
        }
    }
}

/// How decoder centers are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterInit {
    /// Centers are the encoded features of `N` seed points: uniform random
    /// in 3D, a regular lattice of pixel centers in 2D.
    Features,
    /// Centers uniform in `[-1e-4, 1e-4]`.
    Random,
}

#[derive(Clone, Debug)]
pub struct FieldModel<T> {
    pub task: Task,
    pub grid: FeatureGrid<T>,
    pub decoder: GaussianRbfLayer<T>,
    /// Added to the raw density output before the softplus (radiance only).
    pub density_shift: T,
}

impl<T: Real> FieldModel<T> {
    pub fn new(
        task: Task,
        grid_cfg: GridConfig,
        dec_cfg: &DecoderConfig,
        init: CenterInit,
        rng: &Rng,
    ) -> Result<Self> {
        let grid = FeatureGrid::new(grid_cfg, &mut rng.substream("grid-init"))?;
        let mut drng = rng.substream("decoder-init");
        let q = task.out_dim();
        let decoder = match init {
            CenterInit::Random => GaussianRbfLayer::init_random(
                dec_cfg.kernels,
                grid.feature_dim(),
                q,
                dec_cfg.mode,
                &mut drng,
            )?,
            CenterInit::Features => {
                let seeds = seed_points::<T>(grid.dim(), dec_cfg.kernels, &mut rng.substream("seed-points"));
                GaussianRbfLayer::init_centers_from_features(q, dec_cfg.mode, &seeds, &grid, &mut drng)?
            }
        };
        Ok(Self {
            task,
            grid,
            decoder,
            density_shift: T::zero(),
        })
    }

    /// Assembles a model from parts, checking that dimensions agree.
    pub fn from_parts(task: Task, grid: FeatureGrid<T>, decoder: GaussianRbfLayer<T>) -> Result<Self> {
        if decoder.in_dim() != grid.feature_dim() {
            return Err(Error::ShapeMismatch {
                what: "decoder input width",
                expected: grid.feature_dim(),
                got: decoder.in_dim(),
            });
        }
        if decoder.out_dim() != task.out_dim() {
            return Err(Error::ShapeMismatch {
                what: "decoder outputs",
                expected: task.out_dim(),
                got: decoder.out_dim(),
            });
        }
        Ok(Self {
            task,
            grid,
            decoder,
            density_shift: T::zero(),
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn out_dim(&self) -> usize {
        self.decoder.out_dim()
    }

    pub fn levels(&self) -> usize {
        self.grid.levels()
    }

    pub fn kernel_mode(&self) -> KernelMode {
        self.decoder.mode()
    }

    pub fn param_count(&self) -> usize {
        self.grid.params().len() + self.decoder.param_count()
    }

    pub fn cast<U: Real>(&self) -> FieldModel<U> {
        FieldModel {
            task: self.task,
            grid: self.grid.cast(),
            decoder: self.decoder.cast(),
            density_shift: U::lit(self.density_shift.as_f64()),
        }
    }

    /// Raw decoder outputs for a `B x d` batch of points (`B x q`).
    pub fn query(&self, points: &[T]) -> Result<Vec<T>> {
        self.query_levels(points, self.levels())
    }

    /// Raw outputs using only the first `k` levels of the encoding.
    pub fn query_levels(&self, points: &[T], k: usize) -> Result<Vec<T>> {
        let feats = self.grid.encode_batch_levels(points, k)?;
        let width = k * self.grid.config().features_per_level;
        self.decoder.decode_batch(&feats, width)
    }
}

/// `n` seed points for center initialization. In 2D they form a regular
/// lattice of cell centers; in 3D they are uniform in the unit cube.
pub fn seed_points<T: Real>(dim: usize, n: usize, rng: &mut Rng) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dim);
    if dim == 2 {
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        for i in 0..n {
            let (r, c) = (i / cols, i % cols);
            out.push(T::lit((c as f64 + 0.5) / cols as f64));
            out.push(T::lit((r as f64 + 0.5) / rows as f64));
        }
    } else {
        for _ in 0..n * dim {
            out.push(T::lit(rng.uniform()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task, dim: usize) -> FieldModel<f64> {
        let cfg = GridConfig {
            dim,
            levels: 3,
            n_min: 2,
            n_max: 8,
            features_per_level: 2,
            log2_table_size: 6,
            init_scale: 0.1,
        };
        let dec = DecoderConfig {
            kernels: 5,
            mode: KernelMode::Spherical,
        };
        FieldModel::new(task, cfg, &dec, CenterInit::Features, &Rng::new(3)).unwrap()
    }

    #[test]
    fn centers_are_seed_features() {
        let m = tiny(Task::Image, 2);
        let seeds = seed_points::<f64>(2, 5, &mut Rng::new(0));
        let feats = m.grid.encode_batch(&seeds).unwrap();
        let rows = m.decoder.centers_rows();
        assert_eq!(rows, feats);
    }

    #[test]
    fn query_shapes() {
        let m = tiny(Task::Radiance, 3);
        assert_eq!(m.out_dim(), 49);
        let y = m.query(&[0.1, 0.2, 0.3, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(y.len(), 98);
        let full = m.query_levels(&[0.1, 0.2, 0.3], 3).unwrap();
        assert_eq!(&y[..49], &full[..]);
        assert!(m.query_levels(&[0.1, 0.2, 0.3], 4).is_err());
        assert_eq!(m.query_levels(&[0.1, 0.2, 0.3], 1).unwrap().len(), 49);
    }

    #[test]
    fn same_seed_same_model() {
        let a = tiny(Task::Sdf, 3);
        let b = tiny(Task::Sdf, 3);
        assert_eq!(a.grid.params(), b.grid.params());
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn lattice_seeds_cover_image() {
        let s = seed_points::<f64>(2, 64, &mut Rng::new(0));
        assert_eq!(s.len(), 128);
        assert_eq!(&s[..2], &[0.5 / 8.0, 0.5 / 8.0]);
        assert!(s.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn task_tags_round_trip() {
        for t in [Task::Sdf, Task::Image, Task::Radiance] {
            assert_eq!(Task::from_tag(t.tag()).unwrap(), t);
        }
        assert!(Task::from_tag(7).is_err());
    }
}
