//! Toy radiance fields: one decoder pass gives density plus 3 x 16
//! spherical-harmonic color coefficients per point, composited along rays.
//!
//! Decoder output layout: `raw[0]` is the pre-activation density and
//! `raw[1 + 16 k + i]` is coefficient `i` of color channel `k`. Density is
//! zero outside the unit cube.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::model::{FieldModel, Task, SH_COEFFS};
use crate::numerics::{LrSchedule, Real, Rng};
use crate::par::map_chunks;
use crate::rbf::DecoderGrad;
use crate::sdf::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::training::{apply_gradients, GradBuffer, History, HistoryRow, OptimConfig, Optimizer};

/// Real spherical harmonics up to degree 3, `ℓ`-major with `m` ascending
/// (index `ℓ² + ℓ + m`). `v` is normalized first.
pub fn sh_basis(v: Vec3) -> [f64; SH_COEFFS] {
    let [x, y, z] = normalize(v);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * zz - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (xx - yy),
        0.590_043_589_926_643_5 * y * (3.0 * xx - yy),
        2.890_611_442_640_554 * x * y * z,
        0.457_045_799_464_465_8 * y * (5.0 * zz - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * zz - 3.0),
        0.457_045_799_464_465_8 * x * (5.0 * zz - 1.0),
        1.445_305_721_320_277 * z * (xx - yy),
        0.590_043_589_926_643_5 * x * (xx - 3.0 * yy),
    ]
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Activations applied to one row of decoder output.
pub fn radiance_from_raw<T: Real>(raw: &[T], density_shift: f64, sh: &[f64; SH_COEFFS]) -> RadianceSample {
    let mut rgb = [0.0; 3];
    for (k, c) in rgb.iter_mut().enumerate() {
        let coef = &raw[1 + k * SH_COEFFS..1 + (k + 1) * SH_COEFFS];
        let s: f64 = coef.iter().zip(sh).map(|(a, y)| a.as_f64() * y).sum();
        *c = sigmoid(s);
    }
    RadianceSample {
        sigma: softplus(raw[0].as_f64() + density_shift),
        rgb,
    }
}

fn in_unit_cube(p: Vec3) -> bool {
    p.iter().all(|x| (0.0..=1.0).contains(x))
}

/// Encoder and decoder passes made by the radiance path, one each per
/// sample point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub encodes: u64,
    pub decodes: u64,
}

impl PassCounter {
    fn merge(&mut self, o: PassCounter) {
        self.encodes += o.encodes;
        self.decodes += o.decodes;
    }
}

/// Raw decoder outputs for a batch of points: one encode and one decode per
/// point.
fn eval_raw<T: Real>(model: &FieldModel<T>, points: &[Vec3], counter: &mut PassCounter) -> Result<(Vec<T>, Vec<T>)> {
    let flat: Vec<T> = points.iter().flat_map(|p| p.iter().map(|&x| T::lit(x))).collect();
    let feats = model.grid.encode_batch(&flat)?;
    counter.encodes += points.len() as u64;
    let raw = model.decoder.decode_batch(&feats, model.grid.feature_dim())?;
    counter.decodes += points.len() as u64;
    Ok((feats, raw))
}

fn check_radiance(model_task: Task) -> Result<()> {
    if model_task != Task::Radiance {
        return Err(Error::InvalidConfig(format!(
            "expected a radiance model, got {}",
            model_task.name()
        )));
    }
    Ok(())
}

/// Density and color of one point seen from direction `v`.
pub fn decode_radiance<T: Real>(model: &FieldModel<T>, p: Vec3, v: Vec3) -> Result<RadianceSample> {
    check_radiance(model.task)?;
    let (_, raw) = eval_raw(model, &[p], &mut PassCounter::default())?;
    let mut s = radiance_from_raw(&raw, model.density_shift.as_f64(), &sh_basis(v));
    if !in_unit_cube(p) {
        s.sigma = 0.0;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    /// `T_j α_j` per sample.
    pub weights: Vec<f64>,
    /// Transmittance left after the last sample.
    pub transmittance: f64,
}

/// Alpha compositing front to back over a background color.
pub fn composite(sigmas: &[f64], rgbs: &[[f64; 3]], deltas: &[f64], background: [f64; 3]) -> Result<Composite> {
    if sigmas.len() != rgbs.len() || sigmas.len() != deltas.len() {
        return Err(Error::ShapeMismatch {
            what: "ray samples",
            expected: sigmas.len(),
            got: rgbs.len().min(deltas.len()),
        });
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::OutOfRange {
            what: "sample spacing",
            value: "<= 0".into(),
            allowed: "> 0".into(),
        });
    }
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    for j in 0..sigmas.len() {
        let keep = (-sigmas[j] * deltas[j]).exp();
        let w = t * (1.0 - keep);
        for k in 0..3 {
            rgb[k] += w * rgbs[j][k];
        }
        weights.push(w);
        t *= keep;
    }
    let opacity = 1.0 - t;
    for k in 0..3 {
        rgb[k] += t * background[k];
    }
    Ok(Composite {
        rgb,
        opacity,
        weights,
        transmittance: t,
    })
}

/// Gradients of `<d_rgb, composite(...).rgb>` with respect to every density
/// and sample color: `∂C/∂σ_j = δ_j (T_{j+1} c_j - S_j)` with `S_j` the
/// color (background included) accumulated behind sample `j`.
pub fn composite_backward(
    sigmas: &[f64],
    rgbs: &[[f64; 3]],
    deltas: &[f64],
    background: [f64; 3],
    d_rgb: [f64; 3],
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    let c = composite(sigmas, rgbs, deltas, background)?;
    let n = sigmas.len();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // behind = Σ_{k>j} w_k <d, c_k> + T_N <d, bg>
    let mut behind = c.transmittance * dot(d_rgb, background);
    let mut t_next = c.transmittance;
    for j in (0..n).rev() {
        let cj = dot(d_rgb, rgbs[j]);
        d_sigma[j] = deltas[j] * (t_next * cj - behind);
        d_color[j] = scale(d_rgb, c.weights[j]);
        behind += c.weights[j] * cj;
        t_next += c.weights[j];
    }
    Ok((d_sigma, d_color))
}

/// Sample depths along a ray and their spacings.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySegmentation {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

/// `samples` equal bins over `[near, far]`; one depth per bin, at the bin
/// middle or uniformly jittered inside it.
pub fn segment_ray(near: f64, far: f64, samples: usize, jitter: Option<&mut Rng>) -> Result<RaySegmentation> {
    if !(near >= 0.0 && far > near) || samples == 0 {
        return Err(Error::InvalidConfig(format!(
            "ray segment needs 0 <= near < far and samples >= 1, got [{near}, {far}] x {samples}"
        )));
    }
    let h = (far - near) / samples as f64;
    let t = match jitter {
        Some(rng) => (0..samples).map(|j| near + (j as f64 + rng.uniform()) * h).collect(),
        None => (0..samples).map(|j| near + (j as f64 + 0.5) * h).collect(),
    };
    Ok(RaySegmentation {
        t,
        delta: vec![h; samples],
    })
}

/// Pinhole camera looking down its local `-z` axis, `+y` up, `+x` right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: Vec3,
    /// Camera-to-world rotation, row-major; its columns are the camera's
    /// right, up and backward axes.
    pub rotation: [[f64; 3]; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, world_up: Vec3, focal: f64, width: u32, height: u32) -> Result<Self> {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(world_up, back));
        if dot(right, right) < 0.5 {
            return Err(Error::InvalidConfig("camera up vector is parallel to the view direction".into()));
        }
        let up = cross(back, right);
        let cam = Self {
            position: eye,
            rotation: [
                [right[0], up[0], back[0]],
                [right[1], up[1], back[1]],
                [right[2], up[2], back[2]],
            ],
            focal,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn axis(&self, c: usize) -> Vec3 {
        [self.rotation[0][c], self.rotation[1][c], self.rotation[2][c]]
    }

    /// Direction the camera looks along.
    pub fn forward(&self) -> Vec3 {
        scale(self.axis(2), -1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot(self.axis(a), self.axis(b)) - want).abs() > 1e-6 {
                    return Err(Error::InvalidConfig("camera rotation is not orthonormal".into()));
                }
            }
        }
        if !(self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera needs focal > 0 and a non-empty frame".into()));
        }
        Ok(())
    }
}

/// Origin and unit direction of the ray through the center of pixel `(x, y)`
/// (row 0 at the top).
pub fn generate_rays(camera: &Camera, x: u32, y: u32) -> Result<(Vec3, Vec3)> {
    if x >= camera.width || y >= camera.height {
        return Err(Error::OutOfRange {
            what: "pixel",
            value: format!("({x}, {y})"),
            allowed: format!("inside {}x{}", camera.width, camera.height),
        });
    }
    let u = (x as f64 + 0.5 - camera.width as f64 / 2.0) / camera.focal;
    let v = -(y as f64 + 0.5 - camera.height as f64 / 2.0) / camera.focal;
    let d = add(add(scale(camera.axis(0), u), scale(camera.axis(1), v)), camera.forward());
    Ok((camera.position, normalize(d)))
}

/// Everything besides the field needed to render a view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderSettings {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Jitter seed for stratified sampling; bin middles when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 8 {
            return Err(Error::OutOfRange {
                what: "samples per ray",
                value: self.samples.to_string(),
                allowed: ">= 8".into(),
            });
        }
        segment_ray(self.near, self.far, 1, None).map(|_| ())
    }

    fn segment(&self, rng: &mut Option<Rng>) -> Result<RaySegmentation> {
        segment_ray(self.near, self.far, self.samples, rng.as_mut())
    }
}

/// Renders a view of a radiance model. Rows are independent and the jitter
/// stream of each row depends only on the seed and the row.
pub fn render_view<T: Real>(
    model: &FieldModel<T>,
    camera: &Camera,
    settings: &RenderSettings,
    counter: Option<&mut PassCounter>,
) -> Result<ImageBuffer> {
    check_radiance(model.task)?;
    camera.validate()?;
    settings.validate()?;
    let shift = model.density_shift.as_f64();
    let rows = map_chunks(camera.height as usize, |y| -> Result<(Vec<f32>, PassCounter)> {
        let y = y as u32;
        let mut rng = settings.seed.map(|s| Rng::new(s).substream(&format!("row-{y}")));
        let mut pc = PassCounter::default();
        let mut out = Vec::with_capacity(camera.width as usize * 3);
        for x in 0..camera.width {
            let (o, d) = generate_rays(camera, x, y)?;
            let seg = settings.segment(&mut rng)?;
            let pts: Vec<Vec3> = seg.t.iter().map(|&t| add(o, scale(d, t))).collect();
            let (_, raw) = eval_raw(model, &pts, &mut pc)?;
            let sh = sh_basis(d);
            let q = model.out_dim();
            let mut sigmas = Vec::with_capacity(pts.len());
            let mut rgbs = Vec::with_capacity(pts.len());
            for (j, p) in pts.iter().enumerate() {
                let s = radiance_from_raw(&raw[j * q..(j + 1) * q], shift, &sh);
                sigmas.push(if in_unit_cube(*p) { s.sigma } else { 0.0 });
                rgbs.push(s.rgb);
            }
            let c = composite(&sigmas, &rgbs, &seg.delta, settings.background)?;
            out.extend(c.rgb.iter().map(|v| v.clamp(0.0, 1.0) as f32));
        }
        Ok((out, pc))
    });
    let mut data = Vec::with_capacity(camera.width as usize * camera.height as usize * 3);
    let mut total = PassCounter::default();
    for r in rows {
        let (row, pc) = r?;
        data.extend(row);
        total.merge(pc);
    }
    if let Some(c) = counter {
        c.merge(total);
    }
    Ok(ImageBuffer {
        width: camera.width,
        height: camera.height,
        data,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSphere {
    pub center: Vec3,
    pub radius: f64,
    pub rgb: [f64; 3],
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBox {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub rgb: [f64; 3],
    pub sigma: f64,
}

/// Cameras on a sphere around the cube center, all looking at it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub train: usize,
    pub test: usize,
    /// Distance from the cube center.
    pub radius: f64,
    /// Training views alternate between `+elevation` and `-elevation`;
    /// test views sit at half of it, between training azimuths.
    pub elevation_deg: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

/// Constant-density colored primitives inside the unit cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyScene {
    pub spheres: Vec<SceneSphere>,
    #[serde(default)]
    pub boxes: Vec<SceneBox>,
    pub background: [f64; 3],
    pub ring: CameraRing,
    /// Radius of the bounding sphere about the cube center; rays are
    /// sampled over `ring.radius ± (bound_radius + margin)`.
    pub bound_radius: f64,
    pub margin: f64,
}

pub const CUBE_CENTER: Vec3 = [0.5, 0.5, 0.5];

impl ToyScene {
    /// Two spheres of different size and color on a white background.
    pub fn two_spheres() -> Self {
        Self {
            spheres: vec![
                SceneSphere {
                    center: [0.4, 0.45, 0.45],
                    radius: 0.16,
                    rgb: [0.85, 0.25, 0.2],
                    sigma: 40.0,
                },
                SceneSphere {
                    center: [0.63, 0.58, 0.56],
                    radius: 0.11,
                    rgb: [0.2, 0.4, 0.85],
                    sigma: 40.0,
                },
            ],
            boxes: Vec::new(),
            background: [1.0, 1.0, 1.0],
            ring: CameraRing {
                train: 20,
                test: 5,
                radius: 1.6,
                elevation_deg: 25.0,
                focal: 80.0,
                width: 64,
                height: 64,
            },
            bound_radius: 0.5,
            margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene: {m}")));
        let unit = |c: &[f64; 3]| c.iter().all(|x| (0.0..=1.0).contains(x));
        for s in &self.spheres {
            if !(s.radius > 0.0) || !(s.sigma >= 0.0) || !unit(&s.rgb) {
                return bad("sphere needs radius > 0, sigma >= 0 and rgb in [0, 1]");
            }
        }
        for b in &self.boxes {
            if b.half_extents.iter().any(|h| !(*h > 0.0)) || !(b.sigma >= 0.0) || !unit(&b.rgb) {
                return bad("box needs positive half extents, sigma >= 0 and rgb in [0, 1]");
            }
        }
        if !unit(&self.background) {
            return bad("background must be in [0, 1]");
        }
        let r = &self.ring;
        if r.train == 0 || r.width == 0 || r.height == 0 || !(r.focal > 0.0) {
            return bad("camera ring needs train >= 1, focal > 0 and a non-empty frame");
        }
        if !(self.bound_radius > 0.0) || !(self.margin >= 0.0) || r.radius <= self.bound_radius + self.margin {
            return bad("cameras must sit outside the bounding sphere");
        }
        if r.elevation_deg.abs() >= 89.0 {
            return bad("elevation must be within (-89, 89) degrees");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn near_far(&self) -> (f64, f64) {
        let reach = self.bound_radius + self.margin;
        (self.ring.radius - reach, self.ring.radius + reach)
    }

    pub fn render_settings(&self, samples: usize) -> RenderSettings {
        let (near, far) = self.near_far();
        RenderSettings {
            samples,
            near,
            far,
            background: self.background,
            seed: None,
        }
    }

    /// Density and color at `p`; overlapping primitives add densities and
    /// mix colors in proportion.
    pub fn density_color(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        let mut take = |s: f64, c: [f64; 3]| {
            sigma += s;
            for k in 0..3 {
                acc[k] += s * c[k];
            }
        };
        for s in &self.spheres {
            let d = sub(p, s.center);
            if dot(d, d) <= s.radius * s.radius {
                take(s.sigma, s.rgb);
            }
        }
        for b in &self.boxes {
            if (0..3).all(|k| (p[k] - b.center[k]).abs() <= b.half_extents[k]) {
                take(b.sigma, b.rgb);
            }
        }
        if sigma > 0.0 {
            (sigma, scale(acc, 1.0 / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    fn ring_camera(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        let r = &self.ring;
        let dir = [
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        ];
        let eye = add(CUBE_CENTER, scale(dir, r.radius));
        Camera::look_at(eye, CUBE_CENTER, [0.0, 0.0, 1.0], r.focal, r.width, r.height)
    }

    /// Training and held-out cameras; the two sets never share a pose.
    pub fn cameras(&self) -> Result<(Vec<Camera>, Vec<Camera>)> {
        let r = &self.ring;
        let el = r.elevation_deg.to_radians();
        let tau = std::f64::consts::TAU;
        let train = (0..r.train)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                self.ring_camera(tau * i as f64 / r.train as f64, sign * el)
            })
            .collect::<Result<_>>()?;
        let test = (0..r.test)
            .map(|i| self.ring_camera(tau * (i as f64 + 0.5) / r.test.max(1) as f64 + 0.1, 0.5 * el))
            .collect::<Result<_>>()?;
        Ok((train, test))
    }

    /// Ground-truth view from compositing the analytic field with bin-middle
    /// samples.
    pub fn render_truth(&self, camera: &Camera, samples: usize) -> Result<ImageBuffer> {
        let settings = self.render_settings(samples);
        settings.validate()?;
        let rows = map_chunks(camera.height as usize, |y| -> Result<Vec<f32>> {
            let seg = segment_ray(settings.near, settings.far, samples, None)?;
            let mut out = Vec::with_capacity(camera.width as usize * 3);
            let mut sig = vec![0.0; samples];
            let mut col = vec![[0.0; 3]; samples];
            for x in 0..camera.width {
                let (o, d) = generate_rays(camera, x, y as u32)?;
                for (j, &t) in seg.t.iter().enumerate() {
                    (sig[j], col[j]) = self.density_color(add(o, scale(d, t)));
                }
                let c = composite(&sig, &col, &seg.delta, self.background)?;
                out.extend(c.rgb.iter().map(|v| *v as f32));
            }
            Ok(out)
        });
        let mut data = Vec::new();
        for r in rows {
            data.extend(r?);
        }
        Ok(ImageBuffer {
            width: camera.width,
            height: camera.height,
            data,
        })
    }

    /// Posed ground-truth views rendered with [`TRUTH_SAMPLES`] samples.
    pub fn dataset(&self) -> Result<RadianceDataset> {
        self.validate()?;
        let (train, test) = self.cameras()?;
        let views = |cams: Vec<Camera>| -> Result<Vec<View>> {
            cams.into_iter()
                .map(|camera| {
                    let image = self.render_truth(&camera, TRUTH_SAMPLES)?;
                    Ok(View { camera, image })
                })
                .collect()
        };
        let (near, far) = self.near_far();
        Ok(RadianceDataset {
            train: views(train)?,
            test: views(test)?,
            near,
            far,
            background: self.background,
        })
    }
}

/// Raw density offset for new radiance models.
pub const DEFAULT_DENSITY_SHIFT: f64 = 0.0;

/// Samples per ray for ground-truth views.
pub const TRUTH_SAMPLES: usize = 256;

#[derive(Clone, Debug)]
pub struct View {
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug)]
pub struct RadianceDataset {
    pub train: Vec<View>,
    pub test: Vec<View>,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

#[derive(Serialize)]
struct PoseRecord<'a> {
    split: &'a str,
    index: usize,
    camera: &'a Camera,
}

impl RadianceDataset {
    /// Camera poses of both splits as JSON.
    pub fn save_poses(&self, path: &Path) -> Result<()> {
        let mut recs = Vec::new();
        for (split, views) in [("train", &self.train), ("test", &self.test)] {
            for (index, v) in views.iter().enumerate() {
                recs.push(PoseRecord {
                    split,
                    index,
                    camera: &v.camera,
                });
            }
        }
        let text = serde_json::to_string_pretty(&recs).map_err(|e| Error::format("poses", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn render_settings(&self, samples: usize) -> RenderSettings {
        RenderSettings {
            samples,
            near: self.near,
            far: self.far,
            background: self.background,
            seed: None,
        }
    }
}

/// Rays with their sample depths and target colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub origins: Vec<Vec3>,
    pub dirs: Vec<Vec3>,
    /// `B x S` sample depths.
    pub t: Vec<f64>,
    /// Bin width shared by every sample.
    pub delta: f64,
    pub targets: Vec<[f64; 3]>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.t.len() / self.origins.len().max(1)
    }
}

/// `rays` pixels drawn uniformly over all training views with stratified
/// jittered depths.
pub fn sample_rays(data: &RadianceDataset, rays: usize, samples: usize, rng: &mut Rng) -> Result<RayBatch> {
    if data.train.is_empty() || rays == 0 {
        return Err(Error::InvalidConfig("ray sampling needs training views and rays >= 1".into()));
    }
    let mut b = RayBatch {
        origins: Vec::with_capacity(rays),
        dirs: Vec::with_capacity(rays),
        t: Vec::with_capacity(rays * samples),
        delta: 0.0,
        targets: Vec::with_capacity(rays),
    };
    for _ in 0..rays {
        let v = &data.train[rng.index(data.train.len())];
        let x = rng.index(v.camera.width as usize) as u32;
        let y = rng.index(v.camera.height as usize) as u32;
        let (o, d) = generate_rays(&v.camera, x, y)?;
        let seg = segment_ray(data.near, data.far, samples, Some(rng))?;
        b.delta = seg.delta[0];
        b.origins.push(o);
        b.dirs.push(d);
        b.t.extend(seg.t);
        let px = v.image.pixel(x, y);
        b.targets.push([px[0] as f64, px[1] as f64, px[2] as f64]);
    }
    Ok(b)
}

/// Rays per parallel work unit.
const CHUNK_RAYS: usize = 8;

/// Mean L1 photometric loss over rays and channels, with gradients for every
/// parameter accumulated into `grads`. Chunks merge in a fixed order.
pub fn radiance_loss_and_grad<T: Real>(
    model: &FieldModel<T>,
    batch: &RayBatch,
    background: [f64; 3],
    grads: &mut GradBuffer<T>,
    counter: Option<&mut PassCounter>,
) -> Result<f64> {
    check_radiance(model.task)?;
    let n = batch.len();
    let s = batch.samples();
    if n == 0 || s == 0 || batch.t.len() != n * s || batch.targets.len() != n || batch.dirs.len() != n {
        return Err(Error::InvalidConfig("inconsistent ray batch".into()));
    }
    let q = model.out_dim();
    let m = model.grid.feature_dim();
    let shift = model.density_shift.as_f64();
    let inv = 1.0 / (3 * n) as f64;
    let deltas = vec![batch.delta; s];
    let chunks = n.div_ceil(CHUNK_RAYS);
    type Part<T> = (f64, DecoderGrad<T>, Vec<Vec3>, Vec<T>, PassCounter);
    let parts = map_chunks(chunks, |c| -> Result<Part<T>> {
        let r0 = c * CHUNK_RAYS;
        let r1 = (r0 + CHUNK_RAYS).min(n);
        let mut pts = Vec::with_capacity((r1 - r0) * s);
        for r in r0..r1 {
            for j in 0..s {
                pts.push(add(batch.origins[r], scale(batch.dirs[r], batch.t[r * s + j])));
            }
        }
        let mut pc = PassCounter::default();
        let flat: Vec<T> = pts.iter().flat_map(|p| p.iter().map(|&x| T::lit(x))).collect();
        let feats = model.grid.encode_batch(&flat)?;
        pc.encodes += pts.len() as u64;
        let cache = model.decoder.forward_cached(&feats)?;
        pc.decodes += pts.len() as u64;
        let raw = &cache.output;
        let mut upstream = vec![T::zero(); pts.len() * q];
        let mut loss = 0.0;
        let mut sig = vec![0.0; s];
        let mut col = vec![[0.0; 3]; s];
        for r in r0..r1 {
            let sh = sh_basis(batch.dirs[r]);
            let base = (r - r0) * s;
            for j in 0..s {
                let row = &raw[(base + j) * q..(base + j + 1) * q];
                let smp = radiance_from_raw(row, shift, &sh);
                sig[j] = if in_unit_cube(pts[base + j]) { smp.sigma } else { 0.0 };
                col[j] = smp.rgb;
            }
            let comp = composite(&sig, &col, &deltas, background)?;
            let mut d_rgb = [0.0; 3];
            for k in 0..3 {
                let e = comp.rgb[k] - batch.targets[r][k];
                loss += e.abs() * inv;
                d_rgb[k] = if e > 0.0 {
                    inv
                } else if e < 0.0 {
                    -inv
                } else {
                    0.0
                };
            }
            let (d_sigma, d_color) = composite_backward(&sig, &col, &deltas, background, d_rgb)?;
            for j in 0..s {
                let up = &mut upstream[(base + j) * q..(base + j + 1) * q];
                if in_unit_cube(pts[base + j]) {
                    up[0] = T::lit(d_sigma[j] * sigmoid(raw[(base + j) * q].as_f64() + shift));
                }
                for k in 0..3 {
                    let g = d_color[j][k] * col[j][k] * (1.0 - col[j][k]);
                    for (i, y) in sh.iter().enumerate() {
                        up[1 + k * SH_COEFFS + i] = T::lit(g * y);
                    }
                }
            }
        }
        let mut g = DecoderGrad::zeros_like(&model.decoder);
        let gf = model.decoder.backward_cached(&feats, &cache, &upstream, &mut g)?;
        debug_assert_eq!(gf.len(), pts.len() * m);
        Ok((loss, g, pts, gf, pc))
    });
    let mut total = 0.0;
    let mut pc = PassCounter::default();
    let mut all_pts = Vec::with_capacity(n * s * 3);
    let mut feat_grad = Vec::with_capacity(n * s * m);
    for p in parts {
        let (l, g, pts, gf, c) = p?;
        total += l;
        grads.decoder.accumulate(&g);
        all_pts.extend(pts.iter().flat_map(|p| p.iter().map(|&x| T::lit(x))));
        feat_grad.extend(gf);
        pc.merge(c);
    }
    model.grid.encoder_backward(&all_pts, &feat_grad, &mut grads.table)?;
    if let Some(c) = counter {
        c.merge(pc);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadianceFitConfig {
    pub steps: usize,
    pub rays_per_batch: usize,
    pub samples: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Invoke the checkpoint callback every this many steps (0 = never).
    pub checkpoint_every: usize,
}

impl Default for RadianceFitConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            rays_per_batch: 128,
            samples: 64,
            seed: 0,
            optim: OptimConfig {
                decoder_lr: 1e-2,
                schedule: LrSchedule::constant(),
                ..OptimConfig::default()
            },
            checkpoint_every: 0,
        }
    }
}

impl RadianceFitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 {
            return Err(Error::InvalidConfig("rays_per_batch must be >= 1".into()));
        }
        if self.samples < 8 {
            return Err(Error::InvalidConfig("samples must be >= 8".into()));
        }
        self.optim.validate()
    }
}

/// Trains a radiance model on the training views of `data`. Batches come
/// from the `"rays"` substream of the seed.
pub fn fit_radiance<T, C>(
    model: &mut FieldModel<T>,
    data: &RadianceDataset,
    config: &RadianceFitConfig,
    mut on_checkpoint: C,
) -> Result<History>
where
    T: Real,
    C: FnMut(usize, &FieldModel<T>) -> Result<()>,
{
    check_radiance(model.task)?;
    config.validate()?;
    let mut opt = Optimizer::new(model, config.optim.for_run(config.steps))?;
    let mut grads = GradBuffer::new(model);
    let mut rng = Rng::new(config.seed).substream("rays");
    let mut history = History::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let batch = sample_rays(data, config.rays_per_batch, config.samples, &mut rng)?;
        grads.clear();
        let loss = radiance_loss_and_grad(model, &batch, data.background, &mut grads, None)?;
        let max_grad = grads.max_abs();
        if !loss.is_finite() || !max_grad.is_finite() {
            return Err(Error::TrainingAbort { step, loss, max_grad });
        }
        opt.schedule(step);
        apply_gradients(model, &grads, &mut opt)?;
        history.rows.push(HistoryRow {
            step,
            loss,
            lr: opt.table.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(step + 1, model)?;
        }
    }
    Ok(history)
}

/// Mean PSNR of the model over the held-out views.
pub fn test_psnr<T: Real>(model: &FieldModel<T>, data: &RadianceDataset, samples: usize) -> Result<f64> {
    if data.test.is_empty() {
        return Err(Error::InvalidConfig("no held-out views".into()));
    }
    let settings = data.render_settings(samples);
    let mut sum = 0.0;
    for v in &data.test {
        let img = render_view(model, &v.camera, &settings, None)?;
        sum += crate::image::psnr(&img, &v.image)?;
    }
    Ok(sum / data.test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;
    use crate::model::CenterInit;
    use crate::numerics::finite_diff_grad;
    use crate::rbf::{DecoderConfig, KernelMode};
    use std::f64::consts::PI;

    /// Real spherical harmonic from associated Legendre polynomials.
    fn sh_reference(l: i32, m: i32, v: Vec3) -> f64 {
        let [x, y, z] = v;
        let theta = z.clamp(-1.0, 1.0).acos();
        let phi = y.atan2(x);
        let am = m.unsigned_abs() as i32;
        let fact = |n: i32| (1..=n).map(|k| k as f64).product::<f64>();
        let k = ((2 * l + 1) as f64 / (4.0 * PI) * fact(l - am) / fact(l + am)).sqrt();
        // P_l^m without the Condon-Shortley phase, by the standard recurrence
        let c = theta.cos();
        let s = theta.sin();
        let mut pmm = 1.0;
        for i in 0..am {
            pmm *= (2 * i + 1) as f64 * s;
        }
        let p = if l == am {
            pmm
        } else {
            let mut p0 = pmm;
            let mut p1 = c * (2 * am + 1) as f64 * pmm;
            for ll in am + 2..=l {
                let p2 = ((2 * ll - 1) as f64 * c * p1 - (ll + am - 1) as f64 * p0) / (ll - am) as f64;
                p0 = p1;
                p1 = p2;
            }
            p1
        };
        match m.cmp(&0) {
            std::cmp::Ordering::Equal => k * p,
            std::cmp::Ordering::Greater => 2f64.sqrt() * k * (am as f64 * phi).cos() * p,
            std::cmp::Ordering::Less => 2f64.sqrt() * k * (am as f64 * phi).sin() * p,
        }
    }

    #[test]
    fn sh_matches_legendre_construction() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            let v = rng.unit_vector();
            let y = sh_basis(v);
            for l in 0..4 {
                for m in -l..=l {
                    let i = (l * l + l + m) as usize;
                    assert!((y[i] - sh_reference(l, m, v)).abs() < 1e-12, "l={l} m={m}");
                }
            }
        }
    }

    #[test]
    fn sh_values_and_orthonormality() {
        let y = sh_basis([0.0, 0.0, 1.0]);
        assert!((y[0] - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-12);
        assert!((y[2] - (3.0 / (4.0 * PI)).sqrt()).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert_eq!(y[3], 0.0);
        assert_eq!(sh_basis([0.0, 0.0, 2.0]), y);
        let mut rng = Rng::new(2);
        let n = 1_000_000;
        let mut gram = [[0.0f64; 16]; 16];
        for _ in 0..n {
            let y = sh_basis(rng.unit_vector());
            for i in 0..16 {
                for j in i..16 {
                    gram[i][j] += y[i] * y[j];
                }
            }
        }
        for i in 0..16 {
            for j in i..16 {
                let v = gram[i][j] * 4.0 * PI / n as f64;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 5e-3 * 4.0 * PI, "({i},{j}) {v}");
            }
        }
    }

    #[test]
    fn activations() {
        let mut raw = vec![0.0f64; 49];
        let sh = sh_basis([0.3, -0.2, 0.9]);
        let s = radiance_from_raw(&raw, 0.0, &sh);
        assert!((s.sigma - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.rgb, [0.5; 3]);
        raw[1] = 0.7;
        raw[17] = -1.0;
        let a = radiance_from_raw(&raw, 0.0, &sh_basis([1.0, 0.0, 0.0]));
        let b = radiance_from_raw(&raw, 0.0, &sh_basis([0.0, -1.0, 0.0]));
        assert_eq!(a.rgb, b.rgb);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
    }

    #[test]
    fn composite_cases() {
        let bg = [0.2, 0.3, 0.4];
        let c = composite(&[0.0; 4], &[[1.0; 3]; 4], &[0.1; 4], bg).unwrap();
        assert_eq!(c.rgb, bg);
        assert_eq!(c.opacity, 0.0);
        let c = composite(&[1e9, 1.0], &[[0.9, 0.1, 0.5], [0.0; 3]], &[0.1, 0.1], bg).unwrap();
        assert_eq!(c.opacity, 1.0);
        assert_eq!(c.rgb, [0.9, 0.1, 0.5]);
        let c = composite(&[1.0], &[[0.0; 3]], &[1.0], [0.0; 3]).unwrap();
        assert!((c.opacity - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((c.opacity - 0.6321).abs() < 1e-4);
        assert!(composite(&[1.0], &[[0.0; 3]], &[0.0], bg).is_err());
    }

    #[test]
    fn composite_weights_partition_unity() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let n = 1 + rng.index(100);
            let sig: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 50.0)).collect();
            let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
            let d: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.001, 0.1)).collect();
            let c = composite(&sig, &col, &d, [0.0; 3]).unwrap();
            assert!(c.weights.iter().all(|w| *w >= 0.0));
            let s: f64 = c.weights.iter().sum();
            assert!(s <= 1.0 + 1e-12);
            assert!((s + c.transmittance - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let n = 7;
        let sig: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 5.0)).collect();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
        let d = vec![0.13; n];
        let bg = [0.3, 0.6, 0.9];
        let up = [0.7, -1.1, 0.4];
        let (gs, gc) = composite_backward(&sig, &col, &d, bg, up).unwrap();
        let f = |s: &[f64]| dot(composite(s, &col, &d, bg).unwrap().rgb, up);
        let fd = finite_diff_grad(f, &sig, 1e-6).unwrap();
        for j in 0..n {
            assert!((fd[j] - gs[j]).abs() < 1e-8, "{j}: {} vs {}", fd[j], gs[j]);
        }
        let flat: Vec<f64> = col.iter().flatten().copied().collect();
        let f = |c: &[f64]| {
            let cols: Vec<[f64; 3]> = c.chunks(3).map(|x| [x[0], x[1], x[2]]).collect();
            dot(composite(&sig, &cols, &d, bg).unwrap().rgb, up)
        };
        let fd = finite_diff_grad(f, &flat, 1e-6).unwrap();
        for (i, v) in fd.iter().enumerate() {
            assert!((v - gc[i / 3][i % 3]).abs() < 1e-8);
        }
    }

    fn odd_camera() -> Camera {
        Camera::look_at([0.5, -1.0, 0.7], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0], 40.0, 33, 21).unwrap()
    }

    #[test]
    fn ray_generation() {
        let cam = odd_camera();
        let (o, d) = generate_rays(&cam, 16, 10).unwrap();
        assert_eq!(o, cam.position);
        let f = cam.forward();
        assert!((0..3).all(|k| (d[k] - f[k]).abs() < 1e-6));
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let (x, y) = (rng.index(33) as u32, rng.index(21) as u32);
            let (_, d) = generate_rays(&cam, x, y).unwrap();
            assert!((norm3(d) - 1.0).abs() < 1e-12);
            // mirrored pixel: mirrored about the optical axis
            let (_, e) = generate_rays(&cam, 32 - x, 20 - y).unwrap();
            let along = dot(d, f);
            assert!((dot(e, f) - along).abs() < 1e-12);
            let perp_d = sub(d, scale(f, along));
            let perp_e = sub(e, scale(f, along));
            assert!(norm3(add(perp_d, perp_e)) < 1e-12);
        }
        assert!(generate_rays(&cam, 33, 0).is_err());
    }

    fn norm3(v: Vec3) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn segmentation() {
        let s = segment_ray(1.0, 2.0, 4, None).unwrap();
        assert_eq!(s.t, vec![1.125, 1.375, 1.625, 1.875]);
        let mut rng = Rng::new(6);
        let s = segment_ray(0.5, 3.0, 64, Some(&mut rng)).unwrap();
        assert!(s.t.windows(2).all(|w| w[1] > w[0]));
        assert!(s.t.iter().all(|t| (0.5..=3.0).contains(t)));
        assert!(segment_ray(2.0, 1.0, 4, None).is_err());
    }

    fn tiny_radiance() -> FieldModel<f64> {
        let grid = GridConfig {
            dim: 3,
            levels: 2,
            n_min: 2,
            n_max: 4,
            features_per_level: 2,
            log2_table_size: 6,
            init_scale: 0.5,
        };
        let dec = DecoderConfig {
            kernels: 4,
            mode: KernelMode::Anisotropic,
        };
        let mut m = FieldModel::new(Task::Radiance, grid, &dec, CenterInit::Features, &Rng::new(7)).unwrap();
        let mut rng = Rng::new(8);
        let (_, rho, w) = m.decoder.raw_mut();
        for x in w.iter_mut() {
            *x = rng.uniform_in(-1.0, 1.0);
        }
        for x in rho.iter_mut() {
            *x = rng.uniform_in(-0.5, 0.5);
        }
        m.density_shift = 0.5;
        m
    }

    #[test]
    fn empty_field_renders_background() {
        let mut m = tiny_radiance();
        let (_, _, w) = m.decoder.raw_mut();
        w.iter_mut().for_each(|x| *x = 0.0);
        m.density_shift = -1000.0;
        let settings = RenderSettings {
            samples: 16,
            near: 0.5,
            far: 2.5,
            background: [0.1, 0.2, 0.3],
            seed: None,
        };
        let img = render_view(&m, &odd_camera(), &settings, None).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px, [0.1f32, 0.2, 0.3]);
        }
    }

    #[test]
    fn one_pass_per_sample_and_pure_rendering() {
        let m = tiny_radiance();
        let cam = odd_camera();
        let settings = RenderSettings {
            samples: 12,
            near: 0.5,
            far: 2.5,
            background: [1.0; 3],
            seed: Some(3),
        };
        let mut pc = PassCounter::default();
        let a = render_view(&m, &cam, &settings, Some(&mut pc)).unwrap();
        let points = 33 * 21 * 12;
        assert_eq!(pc, PassCounter { encodes: points, decodes: points });
        let b = render_view(&m, &cam, &settings, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_radiance_matches_render_path() {
        let m = tiny_radiance();
        let p = [0.3, 0.6, 0.2];
        let v = normalize([1.0, 2.0, -0.5]);
        let s = decode_radiance(&m, p, v).unwrap();
        let raw = m.query(&p).unwrap();
        let want = radiance_from_raw(&raw, 0.5, &sh_basis(v));
        assert_eq!(s, want);
        assert_eq!(decode_radiance(&m, [1.2, 0.5, 0.5], v).unwrap().sigma, 0.0);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let model = tiny_radiance();
        let settings = RenderSettings {
            samples: 10,
            near: 0.4,
            far: 2.2,
            background: [0.9, 0.8, 0.7],
            seed: None,
        };
        let cam = Camera::look_at([0.5, -0.8, 0.6], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0], 6.0, 4, 4).unwrap();
        let mut rng = Rng::new(9);
        let mut batch = RayBatch {
            origins: vec![],
            dirs: vec![],
            t: vec![],
            delta: 0.0,
            targets: vec![],
        };
        for i in 0..6 {
            let (o, d) = generate_rays(&cam, i % 4, i / 2).unwrap();
            let seg = segment_ray(settings.near, settings.far, settings.samples, Some(&mut rng)).unwrap();
            batch.delta = seg.delta[0];
            batch.origins.push(o);
            batch.dirs.push(d);
            batch.t.extend(seg.t);
            batch.targets.push([rng.uniform(), rng.uniform(), rng.uniform()]);
        }
        let mut grads = GradBuffer::new(&model);
        let mut pc = PassCounter::default();
        radiance_loss_and_grad(&model, &batch, settings.background, &mut grads, Some(&mut pc)).unwrap();
        assert_eq!(pc.encodes, 60);
        let loss_of = |m: &FieldModel<f64>| {
            let mut g = GradBuffer::new(m);
            radiance_loss_and_grad(m, &batch, settings.background, &mut g, None).unwrap()
        };
        // table entries that receive gradient plus decoder parameters
        let touched: Vec<usize> = grads.table.touched().iter().map(|&i| i as usize).collect();
        let mut checked = 0;
        for k in 0..10 {
            let idx = touched[(k * 7919) % touched.len()];
            let analytic = grads.table.values()[idx];
            let f = |th: &[f64]| {
                let mut m = model.clone();
                m.grid.params_mut()[idx] = th[0];
                loss_of(&m)
            };
            let fd = finite_diff_grad(f, &[model.grid.params()[idx]], 1e-6).unwrap()[0];
            assert!(crate::numerics::rel_error(analytic, fd, 1e-6) <= 1e-3, "table {idx}: {analytic} vs {fd}");
            checked += 1;
        }
        let (c, r, w) = model.decoder.raw();
        let sizes = [c.len(), r.len(), w.len()];
        for k in 0..10 {
            let group = k % 3;
            let idx = (k * 104_729) % sizes[group];
            let analytic = match group {
                0 => grads.decoder.centers[idx],
                1 => grads.decoder.log_bandwidth[idx],
                _ => grads.decoder.weights[idx],
            };
            let f = |th: &[f64]| {
                let mut m = model.clone();
                let (c, r, w) = m.decoder.raw_mut();
                [c, r, w][group][idx] = th[0];
                loss_of(&m)
            };
            let start = [model.decoder.raw().0, model.decoder.raw().1, model.decoder.raw().2][group][idx];
            let fd = finite_diff_grad(f, &[start], 1e-6).unwrap()[0];
            assert!(
                crate::numerics::rel_error(analytic, fd, 1e-6) <= 1e-3,
                "group {group} idx {idx}: {analytic} vs {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, 20);
    }

    #[test]
    fn scene_views() {
        let mut scene = ToyScene::two_spheres();
        scene.spheres.clear();
        let cam = scene.cameras().unwrap().0[0].clone();
        let img = scene.render_truth(&cam, 32).unwrap();
        assert!(img.data.chunks(3).all(|p| p == [1.0f32, 1.0, 1.0]));
        // opaque sphere at the look-at point
        scene.spheres.push(SceneSphere {
            center: CUBE_CENTER,
            radius: 0.2,
            rgb: [0.0; 3],
            sigma: 1e4,
        });
        scene.ring.width = 96;
        scene.ring.height = 96;
        let cam = scene.cameras().unwrap().0[0].clone();
        let img = scene.render_truth(&cam, 256).unwrap();
        let covered: f64 = img.data.chunks(3).map(|p| 1.0 - p[0] as f64).sum();
        let radius_px = (covered / PI).sqrt();
        let want = scene.ring.focal * 0.2 / scene.ring.radius;
        assert!((radius_px - want).abs() < 1.0, "{radius_px} vs {want}");
        let (train, test) = ToyScene::two_spheres().cameras().unwrap();
        assert_eq!((train.len(), test.len()), (20, 5));
        for a in &test {
            assert!(train.iter().all(|b| norm3(sub(a.position, b.position)) > 1e-3));
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let s = ToyScene::two_spheres();
        let text = serde_json::to_string(&s).unwrap();
        let back: ToyScene = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replacen("\"margin\"", "\"margn\"", 1);
        assert!(serde_json::from_str::<ToyScene>(&bad).is_err());
    }
}
