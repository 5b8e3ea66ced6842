//! Scalar abstraction, seeded random streams, Adam, learning-rate schedule and
//! the central finite-difference oracle used by every gradient test.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Floating-point scalar used by every trainable component.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Converts a slice between scalar types.
pub fn cast_vec<A: Real, B: Real>(src: &[A]) -> Vec<B> {
    src.iter().map(|&x| B::lit(x.as_f64())).collect()
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded counter-based random stream (ChaCha8).
///
/// Named substreams are derived from the seed and the name only, so the order
/// in which substreams are created or consumed never changes their contents.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `name`.
    pub fn substream(&self, name: &str) -> Rng {
        let key = fnv1a(name);
        let seed = splitmix(self.seed ^ key);
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(key);
        Rng { seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniformly distributed unit vector in 3D.
    pub fn unit_vector(&mut self) -> [f64; 3] {
        loop {
            let v = [self.normal(), self.normal(), self.normal()];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Adam moment buffers for one parameter array.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    /// Learning rate used by the next step. Schedules overwrite it.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    fn begin_step(&mut self) -> Result<(T, T, T, T, T, T)> {
        if !(self.lr > 0.0) {
            return Err(Error::OutOfRange {
                what: "learning rate",
                value: self.lr.to_string(),
                allowed: "> 0".into(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        Ok((
            T::lit(self.beta1),
            T::lit(1.0 - self.beta1),
            T::lit(self.beta2),
            T::lit(1.0 - self.beta2),
            T::lit(self.lr / bc1),
            T::lit(bc2.sqrt()),
        ))
    }

    #[inline(always)]
    fn update_one(&mut self, i: usize, param: &mut T, g: T, k: &(T, T, T, T, T, T)) {
        let (b1, ob1, b2, ob2, step, sqrt_bc2) = *k;
        let m = b1 * self.m[i] + ob1 * g;
        let v = b2 * self.v[i] + ob2 * g * g;
        self.m[i] = m;
        self.v[i] = v;
        *param -= step * m / (v.sqrt() / sqrt_bc2 + T::lit(self.eps));
    }
}

/// One bias-corrected Adam update over a dense parameter array.
pub fn adam_step<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamState<T>) -> Result<()> {
    check_len("adam gradient", param.len(), grad.len())?;
    check_len("adam moments", param.len(), state.m.len())?;
    let k = state.begin_step()?;
    for (i, (p, &g)) in param.iter_mut().zip(grad).enumerate() {
        state.update_one(i, p, g, &k);
    }
    Ok(())
}

/// Adam update restricted to the listed entries.
///
/// Entries outside `touched` keep their value and their moments; the step
/// counter advances once per call. This is the lazy variant used for hash
/// tables, where a batch touches a tiny fraction of all entries.
pub fn adam_step_sparse<T: Real>(
    param: &mut [T],
    grad: &[T],
    touched: &[u32],
    state: &mut AdamState<T>,
) -> Result<()> {
    check_len("adam gradient", param.len(), grad.len())?;
    check_len("adam moments", param.len(), state.m.len())?;
    let k = state.begin_step()?;
    for &i in touched {
        let i = i as usize;
        let g = grad[i];
        state.update_one(i, &mut param[i], g, &k);
    }
    Ok(())
}

/// Constant phase followed by exponential decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Steps held at the base rate.
    pub warmup_steps: usize,
    /// Multiplicative decay reached after `decay_steps` steps past warmup.
    pub decay_factor: f64,
    /// 0 stands for the rest of the run, see [`LrSchedule::for_run`]. An
    /// unresolved 0 holds the base rate.
    pub decay_steps: usize,
}

/// Decays to a tenth of the base rate by the end of the run.
impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 0,
            decay_factor: 0.1,
            decay_steps: 0,
        }
    }
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self {
            warmup_steps: 0,
            decay_factor: 1.0,
            decay_steps: 1,
        }
    }

    /// Resolves `decay_steps == 0` to the steps left after warmup in a run
    /// of `total` steps.
    pub fn for_run(&self, total: usize) -> Self {
        let mut s = *self;
        if s.decay_steps == 0 {
            s.decay_steps = total.saturating_sub(s.warmup_steps).max(1);
        }
        s
    }
}

/// Learning rate at `step` for base rate `base`.
pub fn lr_schedule(step: usize, base: f64, sched: &LrSchedule) -> f64 {
    if step <= sched.warmup_steps || sched.decay_steps == 0 {
        return base;
    }
    let x = (step - sched.warmup_steps) as f64 / sched.decay_steps as f64;
    base * sched.decay_factor.powf(x)
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::OutOfRange {
            what: "finite difference step",
            value: h.to_string(),
            allowed: "> 0".into(),
        });
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: format!("objective at coordinate {i}"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error used by gradient checks: `|a-b| / max(|a|, |b|, floor)`.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
