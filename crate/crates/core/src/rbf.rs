//! Single-layer Gaussian radial basis decoder.
//!
//! `h(f) = Wᵀ B(f)` with `b_i(f) = exp(-Σ_j β_ij (f_j - μ_ij)²)`. Bandwidths are
//! stored as `ρ = ln β`, so every optimizer step keeps them positive. In
//! spherical mode one bandwidth is shared by all feature dimensions of a
//! kernel.
//!
//! Centers (and anisotropic bandwidths) are stored dimension-major (`m x N`)
//! so the inner loops run across kernels and vectorize; weights are `N x q`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::FeatureGrid;
use crate::numerics::{cast_vec, Real, Rng};

/// Kernel responses below `exp(-MAX_EXPONENT)` are flushed to that value.
pub const MAX_EXPONENT: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// One bandwidth per kernel.
    Spherical,
    /// Diagonal covariance: one bandwidth per kernel and feature dimension.
    Anisotropic,
}

impl KernelMode {
    pub fn flag(self) -> u32 {
        match self {
            KernelMode::Spherical => 0,
            KernelMode::Anisotropic => 1,
        }
    }

    pub fn from_flag(flag: u32) -> Result<Self> {
        match flag {
            0 => Ok(KernelMode::Spherical),
            1 => Ok(KernelMode::Anisotropic),
            other => Err(Error::format("checkpoint", format!("unknown kernel mode {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub kernels: usize,
    pub mode: KernelMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            kernels: 64,
            mode: KernelMode::Spherical,
        }
    }
}

/// Receives primitive-operation tallies from the decode path.
pub trait OpCounter {
    fn add(&mut self, ops: u64);
}

impl OpCounter for () {
    #[inline(always)]
    fn add(&mut self, _ops: u64) {}
}

/// Counts scalar operations: each subtract, multiply, add and Gaussian
/// activation is one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub ops: u64,
}

impl OpCounter for FlopCount {
    #[inline(always)]
    fn add(&mut self, ops: u64) {
        self.ops += ops;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRbfLayer<T> {
    kernels: usize,
    in_dim: usize,
    out_dim: usize,
    mode: KernelMode,
    centers: Vec<T>,
    log_bandwidth: Vec<T>,
    weights: Vec<T>,
}

/// Gradients for every decoder parameter, in the layer's storage layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGrad<T> {
    pub centers: Vec<T>,
    pub log_bandwidth: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> DecoderGrad<T> {
    pub fn zeros_like(layer: &GaussianRbfLayer<T>) -> Self {
        Self {
            centers: vec![T::zero(); layer.centers.len()],
            log_bandwidth: vec![T::zero(); layer.log_bandwidth.len()],
            weights: vec![T::zero(); layer.weights.len()],
        }
    }

    pub fn clear(&mut self) {
        for v in [&mut self.centers, &mut self.log_bandwidth, &mut self.weights] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn accumulate(&mut self, other: &DecoderGrad<T>) {
        for (a, b) in [
            (&mut self.centers, &other.centers),
            (&mut self.log_bandwidth, &other.log_bandwidth),
            (&mut self.weights, &other.weights),
        ] {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.centers
            .iter()
            .chain(&self.log_bandwidth)
            .chain(&self.weights)
            .map(|x| x.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

/// Per-batch scratch: bandwidths are exponentiated once per call.
struct Scratch<T> {
    beta: Vec<T>,
    exponent: Vec<T>,
    response: Vec<T>,
    gb: Vec<T>,
    coef: Vec<T>,
}

const LANES: usize = 8;

/// `Σ w_i b_i` with a fixed 8-lane summation order.
#[inline(always)]
fn dot_lanes<T: Real>(w: &[T], b: &[T]) -> T {
    let n = w.len();
    let full = n / LANES * LANES;
    let mut acc = [T::zero(); LANES];
    for c in (0..full).step_by(LANES) {
        for l in 0..LANES {
            acc[l] += w[c + l] * b[c + l];
        }
    }
    let mut s = T::zero();
    for i in full..n {
        s += w[i] * b[i];
    }
    for a in acc {
        s += a;
    }
    s
}

/// `g_mu[i] += a[i] (f - mu[i])`, returning `Σ a[i] (f - mu[i])`.
#[inline(always)]
fn center_grad_lanes<T: Real>(f: T, mu: &[T], a: &[T], g_mu: &mut [T]) -> T {
    let n = mu.len();
    let full = n / LANES * LANES;
    let mut acc = [T::zero(); LANES];
    for c in (0..full).step_by(LANES) {
        for l in 0..LANES {
            let t = a[c + l] * (f - mu[c + l]);
            g_mu[c + l] += t;
            acc[l] += t;
        }
    }
    let mut s = T::zero();
    for i in full..n {
        let t = a[i] * (f - mu[i]);
        g_mu[i] += t;
        s += t;
    }
    for v in acc {
        s += v;
    }
    s
}

impl<T: Real> GaussianRbfLayer<T> {
    /// Layer with zero centers, unit bandwidths and zero weights.
    pub fn zeros(kernels: usize, in_dim: usize, out_dim: usize, mode: KernelMode) -> Result<Self> {
        if kernels == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "decoder dims must be positive (N={kernels}, m={in_dim}, q={out_dim})"
            )));
        }
        let bw_len = match mode {
            KernelMode::Spherical => kernels,
            KernelMode::Anisotropic => kernels * in_dim,
        };
        Ok(Self {
            kernels,
            in_dim,
            out_dim,
            mode,
            centers: vec![T::zero(); kernels * in_dim],
            log_bandwidth: vec![T::zero(); bw_len],
            weights: vec![T::zero(); kernels * out_dim],
        })
    }

    /// Centers uniform in `[-1e-4, 1e-4]`, `β = 1`, weights uniform in
    /// `[-1/√N, 1/√N]`.
    pub fn init_random(
        kernels: usize,
        in_dim: usize,
        out_dim: usize,
        mode: KernelMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layer = Self::zeros(kernels, in_dim, out_dim, mode)?;
        for c in &mut layer.centers {
            *c = T::lit(rng.uniform_in(-1e-4, 1e-4));
        }
        layer.init_weights(rng);
        Ok(layer)
    }

    /// Centers set to the encoded features of `seed_points` (`N x d`).
    pub fn init_centers_from_features(
        out_dim: usize,
        mode: KernelMode,
        seed_points: &[T],
        grid: &FeatureGrid<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = grid.dim();
        if seed_points.is_empty() || seed_points.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                what: "seed points",
                expected: (seed_points.len() / d).max(1) * d,
                got: seed_points.len(),
            });
        }
        let kernels = seed_points.len() / d;
        let m = grid.feature_dim();
        let mut layer = Self::zeros(kernels, m, out_dim, mode)?;
        let feats = grid.encode_batch(seed_points)?;
        for i in 0..kernels {
            for j in 0..m {
                layer.centers[j * kernels + i] = feats[i * m + j];
            }
        }
        layer.init_weights(rng);
        Ok(layer)
    }

    fn init_weights(&mut self, rng: &mut Rng) {
        let s = 1.0 / (self.kernels as f64).sqrt();
        for w in &mut self.weights {
            *w = T::lit(rng.uniform_in(-s, s));
        }
    }

    pub fn kernels(&self) -> usize {
        self.kernels
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn param_count(&self) -> usize {
        self.centers.len() + self.log_bandwidth.len() + self.weights.len()
    }

    pub fn center(&self, i: usize, j: usize) -> T {
        self.centers[j * self.kernels + i]
    }

    pub fn set_center(&mut self, i: usize, j: usize, v: T) {
        self.centers[j * self.kernels + i] = v;
    }

    /// Effective bandwidth `β_ij` (spherical layers ignore `j`).
    pub fn bandwidth(&self, i: usize, j: usize) -> T {
        self.log_bw(i, j).exp()
    }

    pub fn log_bw(&self, i: usize, j: usize) -> T {
        match self.mode {
            KernelMode::Spherical => self.log_bandwidth[i],
            KernelMode::Anisotropic => self.log_bandwidth[j * self.kernels + i],
        }
    }

    pub fn set_log_bw(&mut self, i: usize, j: usize, v: T) {
        match self.mode {
            KernelMode::Spherical => self.log_bandwidth[i] = v,
            KernelMode::Anisotropic => self.log_bandwidth[j * self.kernels + i] = v,
        }
    }

    pub fn weight(&self, i: usize, k: usize) -> T {
        self.weights[i * self.out_dim + k]
    }

    pub fn set_weight(&mut self, i: usize, k: usize, v: T) {
        self.weights[i * self.out_dim + k] = v;
    }

    /// Raw storage: centers (`m x N`), log-bandwidths, weights (`N x q`).
    pub fn raw(&self) -> (&[T], &[T], &[T]) {
        (&self.centers, &self.log_bandwidth, &self.weights)
    }

    pub fn raw_mut(&mut self) -> (&mut [T], &mut [T], &mut [T]) {
        (&mut self.centers, &mut self.log_bandwidth, &mut self.weights)
    }

    /// Centers as kernel-major rows (`N x m`).
    pub fn centers_rows(&self) -> Vec<T> {
        transpose(&self.centers, self.in_dim, self.kernels)
    }

    pub fn set_centers_rows(&mut self, rows: &[T]) -> Result<()> {
        check_len("center rows", self.centers.len(), rows.len())?;
        self.centers = transpose(rows, self.kernels, self.in_dim);
        Ok(())
    }

    /// Log-bandwidths as kernel-major rows (`N x 1` or `N x m`).
    pub fn log_bandwidth_rows(&self) -> Vec<T> {
        match self.mode {
            KernelMode::Spherical => self.log_bandwidth.clone(),
            KernelMode::Anisotropic => transpose(&self.log_bandwidth, self.in_dim, self.kernels),
        }
    }

    pub fn set_log_bandwidth_rows(&mut self, rows: &[T]) -> Result<()> {
        check_len("bandwidth rows", self.log_bandwidth.len(), rows.len())?;
        self.log_bandwidth = match self.mode {
            KernelMode::Spherical => rows.to_vec(),
            KernelMode::Anisotropic => transpose(rows, self.kernels, self.in_dim),
        };
        Ok(())
    }

    pub fn weights_rows(&self) -> &[T] {
        &self.weights
    }

    pub fn set_weights_rows(&mut self, rows: &[T]) -> Result<()> {
        check_len("weight rows", self.weights.len(), rows.len())?;
        self.weights.copy_from_slice(rows);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> GaussianRbfLayer<U> {
        GaussianRbfLayer {
            kernels: self.kernels,
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            mode: self.mode,
            centers: cast_vec(&self.centers),
            log_bandwidth: cast_vec(&self.log_bandwidth),
            weights: cast_vec(&self.weights),
        }
    }

    fn scratch(&self) -> Scratch<T> {
        let n = self.kernels;
        Scratch {
            beta: self.log_bandwidth.iter().map(|r| r.exp()).collect(),
            exponent: vec![T::zero(); n],
            response: vec![T::zero(); n],
            gb: vec![T::zero(); n],
            coef: vec![T::zero(); n],
        }
    }

    fn check_features(&self, f: &[T]) -> Result<()> {
        if f.is_empty() || f.len() > self.in_dim {
            return Err(Error::ShapeMismatch {
                what: "decoder input",
                expected: self.in_dim,
                got: f.len(),
            });
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "decoder input".into(),
            });
        }
        Ok(())
    }

    /// Exponents `e_i` and responses `b_i = exp(-min(e_i, 60))` for the first
    /// `f.len()` feature dimensions.
    #[inline]
    fn responses<C: OpCounter>(&self, beta: &[T], f: &[T], e: &mut [T], b: &mut [T], c: &mut C) {
        let n = self.kernels;
        e.iter_mut().for_each(|x| *x = T::zero());
        match self.mode {
            KernelMode::Spherical => {
                for (j, &fj) in f.iter().enumerate() {
                    let mu = &self.centers[j * n..(j + 1) * n];
                    for (ei, &mi) in e.iter_mut().zip(mu) {
                        let u = fj - mi;
                        *ei += u * u;
                    }
                }
                c.add(3 * (f.len() * n) as u64);
                for (ei, &bi) in e.iter_mut().zip(beta) {
                    *ei *= bi;
                }
            }
            KernelMode::Anisotropic => {
                for (j, &fj) in f.iter().enumerate() {
                    let mu = &self.centers[j * n..(j + 1) * n];
                    let bj = &beta[j * n..(j + 1) * n];
                    for ((ei, &mi), &bi) in e.iter_mut().zip(mu).zip(bj) {
                        let u = fj - mi;
                        *ei += bi * u * u;
                    }
                }
                c.add(4 * (f.len() * n) as u64);
            }
        }
        let cap = T::lit(MAX_EXPONENT);
        for (bi, &ei) in b.iter_mut().zip(e.iter()) {
            *bi = (-ei.min(cap)).exp();
        }
        c.add(n as u64);
    }

    #[inline]
    fn blend<C: OpCounter>(&self, b: &[T], out: &mut [T], c: &mut C) {
        let q = self.out_dim;
        if q == 1 {
            out[0] = dot_lanes(&self.weights, b);
        } else {
            out.iter_mut().for_each(|x| *x = T::zero());
            for (i, &bi) in b.iter().enumerate() {
                let w = &self.weights[i * q..(i + 1) * q];
                for (o, &wk) in out.iter_mut().zip(w) {
                    *o += wk * bi;
                }
            }
        }
        c.add(2 * (q * self.kernels) as u64);
    }

    /// The `N` kernel responses for feature vector `f`.
    pub fn kernel_eval(&self, f: &[T]) -> Result<Vec<T>> {
        self.check_features(f)?;
        let mut s = self.scratch();
        let mut b = vec![T::zero(); self.kernels];
        self.responses(&s.beta, f, &mut s.exponent, &mut b, &mut ());
        Ok(b)
    }

    /// `q` outputs for one full-width feature vector.
    pub fn decode(&self, f: &[T]) -> Result<Vec<T>> {
        check_len("decoder input", self.in_dim, f.len())?;
        self.decode_prefix(f)
    }

    /// Decodes a feature prefix using only the matching leading coordinates of
    /// the centers and bandwidths. Weights are unchanged.
    pub fn decode_prefix(&self, f: &[T]) -> Result<Vec<T>> {
        self.check_features(f)?;
        let mut s = self.scratch();
        let mut out = vec![T::zero(); self.out_dim];
        self.responses(&s.beta, f, &mut s.exponent, &mut s.response, &mut ());
        self.blend(&s.response, &mut out, &mut ());
        Ok(out)
    }

    /// Row-wise decode of a `B x width` feature batch, where `width <= m`.
    pub fn decode_batch(&self, feats: &[T], width: usize) -> Result<Vec<T>> {
        self.decode_batch_counted(feats, width, &mut ())
    }

    /// [`decode_batch`](Self::decode_batch) reporting operation counts.
    pub fn decode_batch_counted<C: OpCounter>(
        &self,
        feats: &[T],
        width: usize,
        counter: &mut C,
    ) -> Result<Vec<T>> {
        if width == 0 || width > self.in_dim || feats.len() % width != 0 {
            return Err(Error::ShapeMismatch {
                what: "decoder batch",
                expected: width,
                got: feats.len(),
            });
        }
        if feats.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "decoder input".into(),
            });
        }
        let mut s = self.scratch();
        let q = self.out_dim;
        let mut out = vec![T::zero(); feats.len() / width * q];
        for (f, o) in feats.chunks_exact(width).zip(out.chunks_exact_mut(q)) {
            self.responses(&s.beta, f, &mut s.exponent, &mut s.response, counter);
            self.blend(&s.response, o, counter);
        }
        Ok(out)
    }

    /// Forward pass that keeps exponents and responses for a later
    /// [`backward_cached`](Self::backward_cached).
    pub fn forward_cached(&self, feats: &[T]) -> Result<ForwardCache<T>> {
        let m = self.in_dim;
        check_len("decoder batch", feats.len() / m * m, feats.len())?;
        let rows = feats.len() / m;
        let n = self.kernels;
        let mut s = self.scratch();
        let mut cache = ForwardCache {
            exponent: vec![T::zero(); rows * n],
            response: vec![T::zero(); rows * n],
            output: vec![T::zero(); rows * self.out_dim],
        };
        for r in 0..rows {
            let f = &feats[r * m..(r + 1) * m];
            let e = &mut cache.exponent[r * n..(r + 1) * n];
            let b = &mut cache.response[r * n..(r + 1) * n];
            self.responses(&s.beta, f, e, b, &mut ());
            self.blend(b, &mut cache.output[r * self.out_dim..(r + 1) * self.out_dim], &mut ());
        }
        s.exponent.clear();
        Ok(cache)
    }

    /// Backward pass over a batch whose forward values are in `cache`.
    /// Parameter gradients accumulate into `grad`; returns `dL/dF` (`B x m`).
    pub fn backward_cached(
        &self,
        feats: &[T],
        cache: &ForwardCache<T>,
        upstream: &[T],
        grad: &mut DecoderGrad<T>,
    ) -> Result<Vec<T>> {
        let m = self.in_dim;
        let n = self.kernels;
        let q = self.out_dim;
        let rows = feats.len() / m;
        check_len("decoder upstream", rows * q, upstream.len())?;
        check_len("decoder cache", rows * n, cache.response.len())?;
        let mut s = self.scratch();
        let mut gf = vec![T::zero(); rows * m];
        for r in 0..rows {
            self.backward_point(
                &mut s,
                &feats[r * m..(r + 1) * m],
                &cache.exponent[r * n..(r + 1) * n],
                &cache.response[r * n..(r + 1) * n],
                &upstream[r * q..(r + 1) * q],
                grad,
                &mut gf[r * m..(r + 1) * m],
            );
        }
        Ok(gf)
    }

    /// Closed-form gradients of the outputs contracted with `upstream`
    /// (`B x q`). Accumulates parameter gradients into `grad` and returns
    /// `dL/dF` (`B x m`).
    pub fn decoder_backward(
        &self,
        feats: &[T],
        upstream: &[T],
        grad: &mut DecoderGrad<T>,
    ) -> Result<Vec<T>> {
        let cache = self.forward_cached(feats)?;
        self.backward_cached(feats, &cache, upstream, grad)
    }

    /// Fused forward and backward for losses that decompose per row.
    ///
    /// `loss_grad(row, output, upstream)` fills `dL/d output` for that row and
    /// returns its loss contribution; the sum of contributions is returned
    /// together with `dL/dF`.
    pub fn forward_backward<F>(
        &self,
        feats: &[T],
        grad: &mut DecoderGrad<T>,
        mut loss_grad: F,
    ) -> (f64, Vec<T>)
    where
        F: FnMut(usize, &[T], &mut [T]) -> f64,
    {
        let m = self.in_dim;
        let q = self.out_dim;
        let rows = feats.len() / m;
        let mut s = self.scratch();
        let mut out = vec![T::zero(); q];
        let mut up = vec![T::zero(); q];
        let mut gf = vec![T::zero(); rows * m];
        let mut e = vec![T::zero(); self.kernels];
        let mut b = vec![T::zero(); self.kernels];
        let mut loss = 0.0;
        for r in 0..rows {
            let f = &feats[r * m..(r + 1) * m];
            self.responses(&s.beta, f, &mut e, &mut b, &mut ());
            self.blend(&b, &mut out, &mut ());
            loss += loss_grad(r, &out, &mut up);
            if up.iter().all(|u| u.is_zero()) {
                continue;
            }
            self.backward_point(&mut s, f, &e, &b, &up, grad, &mut gf[r * m..(r + 1) * m]);
        }
        (loss, gf)
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn backward_point(
        &self,
        s: &mut Scratch<T>,
        f: &[T],
        e: &[T],
        b: &[T],
        up: &[T],
        grad: &mut DecoderGrad<T>,
        gf: &mut [T],
    ) {
        let n = self.kernels;
        let q = self.out_dim;
        let cap = T::lit(MAX_EXPONENT);
        let two = T::lit(2.0);
        // dL/db_i and the weight gradient
        if q == 1 {
            let u = up[0];
            for i in 0..n {
                s.gb[i] = self.weights[i] * u;
                grad.weights[i] += b[i] * u;
            }
        } else {
            for i in 0..n {
                let w = &self.weights[i * q..(i + 1) * q];
                let gw = &mut grad.weights[i * q..(i + 1) * q];
                let mut acc = T::zero();
                for k in 0..q {
                    acc += w[k] * up[k];
                    gw[k] += b[i] * up[k];
                }
                s.gb[i] = acc;
            }
        }
        // c_i = -dL/de_i; zero where the exponent was clamped
        for i in 0..n {
            s.coef[i] = if e[i] < cap { s.gb[i] * b[i] } else { T::zero() };
        }
        match self.mode {
            KernelMode::Spherical => {
                for i in 0..n {
                    grad.log_bandwidth[i] -= s.coef[i] * e[i];
                    // reuse gb as the per-kernel factor 2 c_i β_i
                    s.gb[i] = two * s.coef[i] * s.beta[i];
                }
                for (j, &fj) in f.iter().enumerate() {
                    let mu = &self.centers[j * n..(j + 1) * n];
                    let gmu = &mut grad.centers[j * n..(j + 1) * n];
                    gf[j] -= center_grad_lanes(fj, mu, &s.gb, gmu);
                }
            }
            KernelMode::Anisotropic => {
                for (j, &fj) in f.iter().enumerate() {
                    let mu = &self.centers[j * n..(j + 1) * n];
                    let bj = &s.beta[j * n..(j + 1) * n];
                    let gmu = &mut grad.centers[j * n..(j + 1) * n];
                    let grho = &mut grad.log_bandwidth[j * n..(j + 1) * n];
                    let mut acc = T::zero();
                    for i in 0..n {
                        let u = fj - mu[i];
                        let cb = s.coef[i] * bj[i];
                        let t = two * cb * u;
                        gmu[i] += t;
                        grho[i] -= cb * u * u;
                        acc += t;
                    }
                    gf[j] -= acc;
                }
            }
        }
    }
}

/// Forward values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub exponent: Vec<T>,
    pub response: Vec<T>,
    pub output: Vec<T>,
}

fn transpose<T: Copy>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(src[r * cols + c]);
        }
    }
    out
}
