//! RGB images: IO, rendering a fitted field, PSNR and error maps.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{FieldModel, Task};
use crate::numerics::Real;
use crate::par::map_chunks;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width as usize * height as usize * 3],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Copy rounded to 8-bit levels.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.to_rgb8().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        let n = width as usize * height as usize * 3;
        if bytes.len() != n {
            return Err(Error::ShapeMismatch {
                what: "rgb8 buffer",
                expected: n,
                got: bytes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch {
                what: "image dimensions",
                expected: self.pixel_count(),
                got: other.pixel_count(),
            });
        }
        Ok(())
    }
}

/// Reads a PNG or binary PPM file as 8-bit RGB.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    ImageBuffer::from_rgb8(rgb.width(), rgb.height(), rgb.as_raw())
}

/// Writes 8-bit RGB; the format follows the extension (`.png`, `.ppm`).
pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let format = match ext.as_deref() {
        Some("png") => image::ImageFormat::Png,
        Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("unsupported output format {other:?}; use .png or .ppm"),
            })
        }
    };
    let buf = image::RgbImage::from_raw(img.width, img.height, img.to_rgb8()).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "buffer size does not match dimensions".into(),
    })?;
    let err = |e: &dyn std::fmt::Display| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    if format == image::ImageFormat::Pnm {
        // the generic PNM path writes PAM (P7); ask for a binary pixmap (P6)
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::ImageEncoder;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let enc = PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        return enc
            .write_image(buf.as_raw(), img.width, img.height, image::ExtendedColorType::Rgb8)
            .map_err(|e| err(&e));
    }
    buf.save_with_format(path, format).map_err(|e| err(&e))
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`; `+inf` when the
/// images are identical.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// Pixel-center coordinate of pixel `(x, y)` in the unit square.
pub fn pixel_center(x: u32, y: u32, width: u32, height: u32) -> [f64; 2] {
    [(x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderStats {
    pub seconds: f64,
    pub pixels_per_sec: f64,
}

/// Evaluates an RGB field at every pixel center using the first `levels`
/// levels of the encoding; outputs are clamped to `[0, 1]`.
pub fn render_image<T: Real>(
    model: &FieldModel<T>,
    width: u32,
    height: u32,
    levels: usize,
) -> Result<(ImageBuffer, RenderStats)> {
    if model.task != Task::Image {
        return Err(Error::InvalidConfig(format!(
            "cannot render an image from a {} model",
            model.task.name()
        )));
    }
    let start = Instant::now();
    const BAND: u32 = 8;
    let bands = height.div_ceil(BAND) as usize;
    let parts = map_chunks(bands, |b| -> Result<Vec<f32>> {
        let y0 = b as u32 * BAND;
        let y1 = (y0 + BAND).min(height);
        let mut pts = Vec::with_capacity(((y1 - y0) * width * 2) as usize);
        for y in y0..y1 {
            for x in 0..width {
                let c = pixel_center(x, y, width, height);
                pts.push(T::lit(c[0]));
                pts.push(T::lit(c[1]));
            }
        }
        let out = model.query_levels(&pts, levels)?;
        Ok(out.iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32).collect())
    });
    let mut data = Vec::with_capacity(width as usize * height as usize * 3);
    for p in parts {
        data.extend(p?);
    }
    let secs = start.elapsed().as_secs_f64();
    let img = ImageBuffer { width, height, data };
    let stats = RenderStats {
        seconds: secs,
        pixels_per_sec: img.pixel_count() as f64 / secs.max(1e-9),
    };
    Ok((img, stats))
}

/// Key colors of the error ramp at positions 0, 1/4, 1/2, 3/4 and 1: black,
/// purple, red, amber, white. Entries between keys are linearly interpolated.
pub const RAMP_KEYS: [[f32; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.35, 0.0, 0.55],
    [0.85, 0.15, 0.15],
    [1.0, 0.75, 0.0],
    [1.0, 1.0, 1.0],
];

/// The 256-entry error color ramp.
pub fn error_ramp() -> Vec<[f32; 3]> {
    (0..256)
        .map(|i| {
            let t = i as f32 / 255.0 * 4.0;
            let k = (t.floor() as usize).min(3);
            let f = t - k as f32;
            let (a, b) = (RAMP_KEYS[k], RAMP_KEYS[k + 1]);
            [
                a[0] + (b[0] - a[0]) * f,
                a[1] + (b[1] - a[1]) * f,
                a[2] + (b[2] - a[2]) * f,
            ]
        })
        .collect()
}

/// Ramp index of a per-pixel Euclidean residual, saturating at `cap`.
pub fn ramp_index(residual: f64, cap: f64) -> usize {
    ((residual / cap).clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Heat map of the per-pixel RGB residual norm.
pub fn error_map(a: &ImageBuffer, b: &ImageBuffer, cap: f64) -> Result<ImageBuffer> {
    a.check_same(b)?;
    if !(cap > 0.0) {
        return Err(Error::OutOfRange {
            what: "error cap",
            value: cap.to_string(),
            allowed: "> 0".into(),
        });
    }
    let ramp = error_ramp();
    let mut out = ImageBuffer::new(a.width, a.height);
    for (i, (pa, pb)) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)).enumerate() {
        let r = pa
            .iter()
            .zip(pb)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        out.data[i * 3..i * 3 + 3].copy_from_slice(&ramp[ramp_index(r, cap)]);
    }
    Ok(out)
}
