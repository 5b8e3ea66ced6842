//! Multiresolution hash-grid encoder.
//!
//! Each level holds a table of trainable codes laid out on a lattice of
//! resolution `N_l`. Coarse levels whose lattice fits in the table are indexed
//! densely; finer levels go through a spatial hash. A point is encoded by
//! d-linear interpolation of the `2^d` surrounding codes on every level, and
//! the per-level results are concatenated in level order.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{cast_vec, Real, Rng};

/// Primes for the XOR spatial hash, one per axis.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Input dimension, 2 or 3.
    pub dim: usize,
    pub levels: usize,
    pub n_min: u32,
    pub n_max: u32,
    pub features_per_level: usize,
    /// Hashed levels use `2^log2_table_size` entries.
    pub log2_table_size: u32,
    /// Codes start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl GridConfig {
    /// 16 levels from 4 to 512, one feature per level, 2^19 entries.
    pub fn sdf_default() -> Self {
        Self {
            dim: 3,
            levels: 16,
            n_min: 4,
            n_max: 512,
            features_per_level: 1,
            log2_table_size: 19,
            init_scale: 1e-4,
        }
    }

    /// 16 levels up to the longest image side.
    pub fn image_default(max_side: u32) -> Self {
        Self {
            dim: 2,
            levels: 16,
            n_min: 4.min(max_side.max(1)),
            n_max: max_side.max(1),
            features_per_level: 1,
            log2_table_size: 19,
            init_scale: 1e-4,
        }
    }

    /// 32 levels, one feature each.
    pub fn radiance_default() -> Self {
        Self {
            dim: 3,
            levels: 32,
            n_min: 4,
            n_max: 256,
            features_per_level: 1,
            log2_table_size: 16,
            init_scale: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim != 2 && self.dim != 3 {
            return bad(format!("grid dim must be 2 or 3, got {}", self.dim));
        }
        if self.levels == 0 {
            return bad("grid levels must be >= 1".into());
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad(format!(
                "grid resolutions need 0 < n_min <= n_max, got {}..{}",
                self.n_min, self.n_max
            ));
        }
        if self.features_per_level == 0 {
            return bad("features_per_level must be >= 1".into());
        }
        if self.log2_table_size == 0 || self.log2_table_size > 28 {
            return bad(format!(
                "log2_table_size must be in 1..=28, got {}",
                self.log2_table_size
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be finite and >= 0".into());
        }
        Ok(())
    }

    /// Encoded feature dimension `m = L * F`.
    pub fn feature_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn table_size(&self) -> u32 {
        1 << self.log2_table_size
    }
}

/// Lattice resolution of level `l`: `floor(n_min * b^l)` with geometric growth
/// `b` chosen so the last level lands on `n_max`.
pub fn level_resolution(config: &GridConfig, l: usize) -> u32 {
    if config.levels <= 1 || l == 0 {
        return config.n_min;
    }
    let ln_min = (config.n_min as f64).ln();
    let ln_max = (config.n_max as f64).ln();
    let growth = ((ln_max - ln_min) / (config.levels - 1) as f64).exp();
    let n = config.n_min as f64 * growth.powi(l as i32);
    // Guard against 511.99999 at the top endpoint.
    ((n + 1e-6).floor() as u32).clamp(config.n_min, config.n_max)
}

/// XOR-of-products spatial hash masked to a power-of-two table.
#[inline]
pub fn hash_index(coords: &[u32], table_size: u32) -> u32 {
    debug_assert!(table_size.is_power_of_two());
    let mut h = 0u32;
    for (c, p) in coords.iter().zip(HASH_PRIMES) {
        h ^= c.wrapping_mul(p);
    }
    h & (table_size - 1)
}

#[derive(Clone, Copy, Debug)]
struct LevelLayout {
    resolution: u32,
    /// First parameter of the level in the flat table.
    offset: usize,
    entries: usize,
    dense: bool,
}

/// Trainable per-level code tables.
#[derive(Clone, Debug)]
pub struct FeatureGrid<T> {
    config: GridConfig,
    layout: Vec<LevelLayout>,
    /// All levels back to back, level-major, `features_per_level` per entry.
    params: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    /// Grid with all codes set to zero.
    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Vec::with_capacity(config.levels);
        let mut offset = 0usize;
        let table = config.table_size() as u64;
        for l in 0..config.levels {
            let resolution = level_resolution(&config, l);
            let lattice = (resolution as u64 + 1).pow(config.dim as u32);
            let dense = lattice <= table;
            let entries = if dense { lattice } else { table } as usize;
            layout.push(LevelLayout {
                resolution,
                offset,
                entries,
                dense,
            });
            offset += entries * config.features_per_level;
        }
        if offset > u32::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "grid has {offset} parameters, more than 2^32"
            )));
        }
        Ok(Self {
            config,
            layout,
            params: vec![T::zero(); offset],
        })
    }

    /// Grid with codes drawn uniformly from `[-init_scale, init_scale]`.
    pub fn new(config: GridConfig, rng: &mut Rng) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        let s = grid.config.init_scale;
        for p in &mut grid.params {
            *p = T::lit(rng.uniform_in(-s, s));
        }
        Ok(grid)
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    pub fn resolution(&self, l: usize) -> u32 {
        self.layout[l].resolution
    }

    pub fn level_entries(&self, l: usize) -> usize {
        self.layout[l].entries
    }

    pub fn level_is_dense(&self, l: usize) -> bool {
        self.layout[l].dense
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Parameters belonging to level `l`.
    pub fn level_params(&self, l: usize) -> &[T] {
        let lay = self.layout[l];
        &self.params[lay.offset..lay.offset + lay.entries * self.config.features_per_level]
    }

    pub fn level_params_mut(&mut self, l: usize) -> &mut [T] {
        let lay = self.layout[l];
        let f = self.config.features_per_level;
        &mut self.params[lay.offset..lay.offset + lay.entries * f]
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: cast_vec(&self.params),
        }
    }

    /// Table entry of an integer lattice corner on level `l`.
    pub fn entry_index(&self, l: usize, coords: &[u32]) -> usize {
        let lay = &self.layout[l];
        if lay.dense {
            let stride = lay.resolution as usize + 1;
            let mut idx = 0usize;
            let mut s = 1usize;
            for &c in coords {
                idx += c as usize * s;
                s *= stride;
            }
            idx
        } else {
            hash_index(coords, self.config.table_size()) as usize
        }
    }

    /// Flat parameter indices (first feature) and interpolation weights of
    /// the `2^d` corners around `p` on level `l`. Returns the corner count.
    #[inline]
    pub fn level_corners(&self, l: usize, p: &[T], idx: &mut [usize; 8], w: &mut [T; 8]) -> usize {
        let d = self.config.dim;
        let lay = self.layout[l];
        let res = T::lit(lay.resolution as f64);
        let top = T::lit((lay.resolution - 1) as f64);
        let mut base = [0u32; 3];
        let mut frac = [T::zero(); 3];
        for j in 0..d {
            let x = p[j].max(T::zero()).min(T::one()) * res;
            let b = x.floor().min(top);
            base[j] = b.to_u32().unwrap_or(0);
            frac[j] = x - b;
        }
        let fpl = self.config.features_per_level;
        let count = 1usize << d;
        let mut coord = [0u32; 3];
        for c in 0..count {
            let mut wt = T::one();
            for j in 0..d {
                let bit = (c >> j) & 1;
                coord[j] = base[j] + bit as u32;
                wt *= if bit == 1 { frac[j] } else { T::one() - frac[j] };
            }
            idx[c] = lay.offset + self.entry_index(l, &coord[..d]) * fpl;
            w[c] = wt;
        }
        count
    }

    /// Encodes one point using the first `levels` levels into `out`.
    ///
    /// Coordinates are clamped to the unit cube; `out` must hold
    /// `levels * features_per_level` values.
    #[inline]
    pub fn encode_levels_into(&self, p: &[T], levels: usize, out: &mut [T]) {
        let fpl = self.config.features_per_level;
        let mut idx = [0usize; 8];
        let mut w = [T::zero(); 8];
        for l in 0..levels {
            let n = self.level_corners(l, p, &mut idx, &mut w);
            let dst = &mut out[l * fpl..(l + 1) * fpl];
            dst.iter_mut().for_each(|x| *x = T::zero());
            for c in 0..n {
                let src = &self.params[idx[c]..idx[c] + fpl];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += w[c] * s;
                }
            }
        }
    }

    fn check_point(&self, p: &[T]) -> Result<()> {
        check_len("point dimension", self.config.dim, p.len())?;
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "query point".into(),
            });
        }
        Ok(())
    }

    /// Feature vector `γ(p)` of length `m`.
    pub fn encode_point(&self, p: &[T]) -> Result<Vec<T>> {
        self.check_point(p)?;
        let mut out = vec![T::zero(); self.feature_dim()];
        self.encode_levels_into(p, self.config.levels, &mut out);
        Ok(out)
    }

    /// Row-wise encoding of `B x d` points into `B x m` features.
    pub fn encode_batch(&self, points: &[T]) -> Result<Vec<T>> {
        self.encode_batch_levels(points, self.config.levels)
    }

    /// Like [`encode_batch`](Self::encode_batch) but only the first `levels` levels.
    pub fn encode_batch_levels(&self, points: &[T], levels: usize) -> Result<Vec<T>> {
        let d = self.config.dim;
        if points.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                what: "point batch",
                expected: points.len() / d * d,
                got: points.len(),
            });
        }
        check_levels(levels, self.config.levels)?;
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "query point".into(),
            });
        }
        let width = levels * self.config.features_per_level;
        let mut out = vec![T::zero(); points.len() / d * width];
        for (p, o) in points.chunks_exact(d).zip(out.chunks_exact_mut(width)) {
            self.encode_levels_into(p, levels, o);
        }
        Ok(out)
    }

    /// Scatters `upstream` (`B x m`) back onto the codes through the
    /// interpolation weights, accumulating into `grad`.
    pub fn encoder_backward(
        &self,
        points: &[T],
        upstream: &[T],
        grad: &mut TableGrad<T>,
    ) -> Result<()> {
        let d = self.config.dim;
        let m = self.feature_dim();
        check_len("encoder upstream", points.len() / d * m, upstream.len())?;
        check_len("table gradient", self.params.len(), grad.len())?;
        for (p, up) in points.chunks_exact(d).zip(upstream.chunks_exact(m)) {
            self.backward_point(p, up, grad);
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn backward_point(&self, p: &[T], up: &[T], grad: &mut TableGrad<T>) {
        let fpl = self.config.features_per_level;
        let mut idx = [0usize; 8];
        let mut w = [T::zero(); 8];
        for l in 0..up.len() / fpl {
            let g = &up[l * fpl..(l + 1) * fpl];
            if g.iter().all(|x| x.is_zero()) {
                continue;
            }
            let n = self.level_corners(l, p, &mut idx, &mut w);
            for c in 0..n {
                for (f, &gf) in g.iter().enumerate() {
                    grad.add(idx[c] + f, w[c] * gf);
                }
            }
        }
    }
}

fn check_levels(k: usize, levels: usize) -> Result<()> {
    if k == 0 || k > levels {
        return Err(Error::OutOfRange {
            what: "level count",
            value: k.to_string(),
            allowed: format!("1..={levels}"),
        });
    }
    Ok(())
}

/// First `k` levels of a feature vector.
pub fn slice_levels<T: Copy>(
    f: &[T],
    k: usize,
    features_per_level: usize,
    levels: usize,
) -> Result<Vec<T>> {
    check_levels(k, levels)?;
    check_len("feature vector", levels * features_per_level, f.len())?;
    Ok(f[..k * features_per_level].to_vec())
}

/// Dense gradient accumulator over all table entries that remembers which
/// entries were written, so clearing and sparse Adam cost O(touched).
#[derive(Clone, Debug)]
pub struct TableGrad<T> {
    values: Vec<T>,
    marked: Vec<bool>,
    touched: Vec<u32>,
}

impl<T: Real> TableGrad<T> {
    pub fn new(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
            marked: vec![false; len],
            touched: Vec::new(),
        }
    }

    pub fn for_grid(grid: &FeatureGrid<T>) -> Self {
        Self::new(grid.params().len())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn add(&mut self, i: usize, v: T) {
        if !self.marked[i] {
            self.marked[i] = true;
            self.touched.push(i as u32);
        }
        self.values[i] += v;
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Entries written since the last clear, in first-touch order.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn clear(&mut self) {
        for &i in &self.touched {
            self.values[i as usize] = T::zero();
            self.marked[i as usize] = false;
        }
        self.touched.clear();
    }

    pub fn max_abs(&self) -> f64 {
        self.touched
            .iter()
            .map(|&i| self.values[i as usize].as_f64().abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg2(levels: usize, n_min: u32, n_max: u32, log2_t: u32) -> GridConfig {
        GridConfig {
            dim: 2,
            levels,
            n_min,
            n_max,
            features_per_level: 2,
            log2_table_size: log2_t,
            init_scale: 1e-4,
        }
    }

    #[test]
    fn resolution_schedule() {
        let c = GridConfig::sdf_default();
        assert_eq!(level_resolution(&c, 0), 4);
        assert_eq!(level_resolution(&c, 15), 512);
        // floor(4 * (128^(1/15))^8)
        assert_eq!(level_resolution(&c, 8), 53);
        let one = GridConfig { levels: 1, ..c.clone() };
        assert_eq!(level_resolution(&one, 0), 4);
        let mut prev = 0;
        for l in 0..c.levels {
            let n = level_resolution(&c, l);
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn hash_values() {
        let t = 1 << 19;
        assert_eq!(hash_index(&[0, 0, 0], t), 0);
        assert_eq!(hash_index(&[0, 0, 0], 8), 0);
        assert_eq!(hash_index(&[1, 0, 0], t), 1);
        assert_eq!(hash_index(&[0, 1, 0], t), 489_905);
    }

    #[test]
    fn hash_golden_values() {
        // Reference computed with 64-bit integer arithmetic: XOR of
        // (c_i * prime_i) mod 2^32, masked to 2^19.
        let mut acc = 0u64;
        for i in 0..100u64 {
            let c = [(i * 7) as u32, (i * i + 3) as u32, (1000 - i) as u32];
            let mut h = 0u64;
            for (k, p) in HASH_PRIMES.iter().enumerate() {
                h ^= (c[k] as u64 * *p as u64) & 0xffff_ffff;
            }
            let expect = (h & ((1 << 19) - 1)) as u32;
            let got = hash_index(&c, 1 << 19);
            assert_eq!(got, expect);
            acc = acc.wrapping_mul(31).wrapping_add(got as u64);
        }
        // Frozen digest of the 100 values above.
        assert_eq!(acc, GOLDEN_DIGEST);
    }

    const GOLDEN_DIGEST: u64 = 7_593_202_231_243_146_158;

    #[test]
    fn dense_and_hashed_levels() {
        let g = FeatureGrid::<f32>::zeros(cfg2(3, 4, 64, 8)).unwrap();
        // (4+1)^2 = 25 <= 256 dense; (64+1)^2 > 256 hashed
        assert!(g.level_is_dense(0));
        assert_eq!(g.level_entries(0), 25);
        assert!(!g.level_is_dense(2));
        assert_eq!(g.level_entries(2), 256);
    }

    #[test]
    fn corner_and_center_queries() {
        let mut rng = Rng::new(3);
        let g = FeatureGrid::<f64>::new(cfg2(2, 4, 8, 10), &mut rng).unwrap();
        // (0.25, 0.5) is a lattice node on level 0 (res 4): x=1, y=2
        let f = g.encode_point(&[0.25, 0.5]).unwrap();
        let e = g.entry_index(0, &[1, 2]) * 2;
        assert_eq!(&f[0..2], &g.level_params(0)[e..e + 2]);

        // cell center on level 0: mean of the four corners
        let f = g.encode_point(&[0.125, 0.125]).unwrap();
        for k in 0..2 {
            let mut mean = 0.0;
            for c in [[0, 0], [1, 0], [0, 1], [1, 1]] {
                mean += g.level_params(0)[g.entry_index(0, &c) * 2 + k];
            }
            assert!((f[k] - mean / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_tables_give_constant_features() {
        let mut g = FeatureGrid::<f32>::zeros(cfg2(4, 2, 40, 9)).unwrap();
        g.params_mut().iter_mut().for_each(|x| *x = 0.75);
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let p = [rng.uniform() as f32, rng.uniform() as f32];
            for v in g.encode_point(&p).unwrap() {
                assert!((v - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_matches_scalar() {
        let mut rng = Rng::new(5);
        let g = FeatureGrid::<f32>::new(cfg2(5, 3, 100, 10), &mut rng).unwrap();
        let pts = [0.1f32, 0.9, 0.1, 0.9, 0.5, 0.25];
        let batch = g.encode_batch(&pts).unwrap();
        let m = g.feature_dim();
        for (i, p) in pts.chunks(2).enumerate() {
            assert_eq!(&batch[i * m..(i + 1) * m], g.encode_point(p).unwrap().as_slice());
        }
        assert_eq!(&batch[0..m], &batch[m..2 * m]);
    }

    #[test]
    fn out_of_domain_is_clamped_and_nan_rejected() {
        let mut rng = Rng::new(1);
        let g = FeatureGrid::<f32>::new(cfg2(2, 4, 8, 8), &mut rng).unwrap();
        assert_eq!(
            g.encode_point(&[1.5, -0.2]).unwrap(),
            g.encode_point(&[1.0, 0.0]).unwrap()
        );
        assert!(matches!(
            g.encode_point(&[f32::NAN, 0.1]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_cases() {
        let mut rng = Rng::new(2);
        let g = FeatureGrid::<f64>::new(cfg2(2, 4, 8, 8), &mut rng).unwrap();
        let mut tg = TableGrad::for_grid(&g);
        g.encoder_backward(&[0.3, 0.6], &[0.0; 4], &mut tg).unwrap();
        assert!(tg.values().iter().all(|&x| x == 0.0));

        // node on both levels: (0.25, 0.5) on res 4 and res 8
        g.encoder_backward(&[0.25, 0.5], &[1.0, 2.0, 3.0, 4.0], &mut tg).unwrap();
        let nz: Vec<f64> = tg.values().iter().copied().filter(|&x| x != 0.0).collect();
        assert_eq!(nz.len(), 4);
        let i0 = g.entry_index(0, &[1, 2]) * 2;
        assert_eq!(tg.values()[i0], 1.0);
        assert_eq!(tg.values()[i0 + 1], 2.0);

        tg.clear();
        assert!(tg.values().iter().all(|&x| x == 0.0));
        g.encoder_backward(&[0.31, 0.67], &[0.7, -0.3, 0.0, 0.0], &mut tg)
            .unwrap();
        let (mut s0, mut s1) = (0.0, 0.0);
        for &i in tg.touched() {
            if i % 2 == 0 {
                s0 += tg.values()[i as usize];
            } else {
                s1 += tg.values()[i as usize];
            }
        }
        assert!((s0 - 0.7).abs() < 1e-12 && (s1 + 0.3).abs() < 1e-12);
    }

    #[test]
    fn slicing() {
        let f = [1, 2, 3, 4, 5, 6];
        assert_eq!(slice_levels(&f, 3, 2, 3).unwrap(), f.to_vec());
        assert_eq!(slice_levels(&f, 1, 2, 3).unwrap(), vec![1, 2]);
        let twice = slice_levels(&slice_levels(&f, 2, 2, 3).unwrap(), 1, 2, 2).unwrap();
        assert_eq!(twice, slice_levels(&f, 1, 2, 3).unwrap());
        assert!(slice_levels(&f, 0, 2, 3).is_err());
        assert!(slice_levels(&f, 4, 2, 3).is_err());
    }

    #[test]
    fn resolution_matches_oracle() {
        // independent evaluation of floor(4 * (512/4)^(l/15))
        let c = GridConfig::sdf_default();
        for l in 0..16 {
            let exact = 4.0 * 128f64.powf(l as f64 / 15.0);
            let expect = if l == 15 { 512 } else { exact.floor() as u32 };
            assert_eq!(level_resolution(&c, l), expect, "level {l}");
        }
    }

    proptest::proptest! {
        #[test]
        fn features_within_corner_range(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let cfg = GridConfig { dim: 3, levels: 4, n_min: 3, n_max: 90, features_per_level: 1, log2_table_size: 12, init_scale: 1.0 };
            let g = FeatureGrid::<f64>::new(cfg, &mut rng).unwrap();
            let p = [x, y, z];
            let f = g.encode_point(&p).unwrap();
            let mut idx = [0usize; 8];
            let mut w = [0.0f64; 8];
            for l in 0..4 {
                let n = g.level_corners(l, &p, &mut idx, &mut w);
                let vals: Vec<f64> = idx[..n].iter().map(|&i| g.params()[i]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let wsum: f64 = w[..n].iter().sum();
                proptest::prop_assert!(w[..n].iter().all(|&v| v >= 0.0));
                proptest::prop_assert!((wsum - 1.0).abs() < 1e-12);
                proptest::prop_assert!(f[l] >= lo - 1e-12 && f[l] <= hi + 1e-12);
            }
        }
    }
}
