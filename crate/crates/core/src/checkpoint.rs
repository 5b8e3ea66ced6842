//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GNF1"  version:u32  task:u32
//! grid:    dim levels n_min n_max features_per_level log2_table_size : u32
//!          init_scale:f32  count:u32  codes:[f32; count]
//! decoder: kernels in_dim out_dim mode : u32
//!          centers:[f32; N*m]  log_bandwidth:[f32; N or N*m]  weights:[f32; N*q]
//! density_shift:f32  step:u32
//! ```
//!
//! Decoder arrays are row-major with one row per kernel.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridConfig};
use crate::model::{FieldModel, Task};
use crate::numerics::Real;
use crate::rbf::{GaussianRbfLayer, KernelMode};

pub const MAGIC: &[u8; 4] = b"GNF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FieldModel<f32>,
    pub step: u32,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn floats<T: Real>(&mut self, v: &[T]) {
        for x in v {
            self.f32(x.as_f64() as f32);
        }
    }
}

fn as_u32(what: &'static str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{what} {v} does not fit in 32 bits")))
}

/// Serializes `model` at training step `step`.
pub fn encode_checkpoint<T: Real>(model: &FieldModel<T>, step: u32) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(model.task.tag());
    let g = model.grid.config();
    w.u32(g.dim as u32);
    w.u32(as_u32("levels", g.levels)?);
    w.u32(g.n_min);
    w.u32(g.n_max);
    w.u32(as_u32("features per level", g.features_per_level)?);
    w.u32(g.log2_table_size);
    w.f32(g.init_scale as f32);
    w.u32(as_u32("grid parameters", model.grid.params().len())?);
    w.floats(model.grid.params());
    let d = &model.decoder;
    w.u32(as_u32("kernels", d.kernels())?);
    w.u32(as_u32("decoder inputs", d.in_dim())?);
    w.u32(as_u32("decoder outputs", d.out_dim())?);
    w.u32(d.mode().flag());
    w.floats(&d.centers_rows());
    w.floats(&d.log_bandwidth_rows());
    w.floats(d.weights_rows());
    w.f32(model.density_shift.as_f64() as f32);
    w.u32(step);
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses and validates a serialized checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected GNF1"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let task = Task::from_tag(r.u32()?)?;
    let cfg = GridConfig {
        dim: r.u32()? as usize,
        levels: r.u32()? as usize,
        n_min: r.u32()?,
        n_max: r.u32()?,
        features_per_level: r.u32()? as usize,
        log2_table_size: r.u32()?,
        init_scale: r.f32()? as f64,
    };
    cfg.validate()
        .map_err(|e| Error::format("checkpoint", format!("grid section: {e}")))?;
    let mut grid = FeatureGrid::<f32>::zeros(cfg)?;
    let count = r.u32()? as usize;
    if count != grid.params().len() {
        return Err(Error::format(
            "checkpoint",
            format!("grid holds {count} codes, configuration needs {}", grid.params().len()),
        ));
    }
    grid.params_mut().copy_from_slice(&r.floats(count)?);
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let q = r.u32()? as usize;
    let mode = KernelMode::from_flag(r.u32()?)?;
    if m != grid.feature_dim() || q != task.out_dim() || n == 0 {
        return Err(Error::format(
            "checkpoint",
            format!(
                "decoder {n} x {m} -> {q} does not fit a {} model with {} features",
                task.name(),
                grid.feature_dim()
            ),
        ));
    }
    let mut dec = GaussianRbfLayer::<f32>::zeros(n, m, q, mode)?;
    dec.set_centers_rows(&r.floats(n * m)?)?;
    let rho_len = match mode {
        KernelMode::Spherical => n,
        KernelMode::Anisotropic => n * m,
    };
    dec.set_log_bandwidth_rows(&r.floats(rho_len)?)?;
    dec.set_weights_rows(&r.floats(n * q)?)?;
    let mut model = FieldModel::from_parts(task, grid, dec)?;
    model.density_shift = r.f32()?;
    let step = r.u32()?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    let finite = model.grid.params().iter().all(|x| x.is_finite()) && model.density_shift.is_finite();
    let (c, b, w) = model.decoder.raw();
    if !finite || !c.iter().chain(b).chain(w).all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            what: "checkpoint parameters".into(),
        });
    }
    Ok(Checkpoint { model, step })
}

pub fn write_checkpoint<T: Real>(mut out: impl Write, model: &FieldModel<T>, step: u32) -> Result<()> {
    let bytes = encode_checkpoint(model, step)?;
    out.write_all(&bytes).map_err(|e| Error::io("<checkpoint stream>", e))
}

pub fn read_checkpoint(mut input: impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<checkpoint stream>", e))?;
    decode_checkpoint(&bytes)
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &FieldModel<T>, step: u32) -> Result<()> {
    let bytes = encode_checkpoint(model, step)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
