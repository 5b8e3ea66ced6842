//! Geometry metrics: Chamfer-L1, normal consistency and angular error, and
//! volumetric IoU.

use super::bvh::MeshSdf;
use super::mesh::TriMesh;
use super::{dot, sub, SdfOracle, Vec3};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::par::map_chunks;

/// Static 3-d tree for nearest-neighbor queries.
struct KdTree {
    pts: Vec<Vec3>,
    axis: Vec<u8>,
}

impl KdTree {
    fn new(points: &[Vec3]) -> Self {
        let mut t = Self {
            pts: points.to_vec(),
            axis: vec![0; points.len()],
        };
        let mut stack = vec![(0, points.len())];
        while let Some((lo, hi)) = stack.pop() {
            if hi - lo <= 1 {
                continue;
            }
            let mut min = [f64::INFINITY; 3];
            let mut max = [f64::NEG_INFINITY; 3];
            for p in &t.pts[lo..hi] {
                for j in 0..3 {
                    min[j] = min[j].min(p[j]);
                    max[j] = max[j].max(p[j]);
                }
            }
            let ax = (0..3)
                .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
                .unwrap_or(0);
            let mid = (lo + hi) / 2;
            t.pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| a[ax].total_cmp(&b[ax]));
            t.axis[mid] = ax as u8;
            stack.push((lo, mid));
            stack.push((mid + 1, hi));
        }
        t
    }

    fn nearest_dist2(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.pts.len(), &mut best);
        best
    }

    fn search(&self, q: Vec3, lo: usize, hi: usize, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let p = self.pts[mid];
        let d = sub(q, p);
        *best = best.min(dot(d, d));
        if hi - lo == 1 {
            return;
        }
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - p[ax];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff < *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

const QUERY_CHUNK: usize = 4096;

fn mean_nearest(tree: &KdTree, queries: &[Vec3]) -> f64 {
    let chunks = queries.len().div_ceil(QUERY_CHUNK);
    let sums = map_chunks(chunks, |c| {
        queries[c * QUERY_CHUNK..((c + 1) * QUERY_CHUNK).min(queries.len())]
            .iter()
            .map(|&q| tree.nearest_dist2(q).sqrt())
            .sum::<f64>()
    });
    sums.iter().sum::<f64>() / queries.len() as f64
}

/// Symmetric mean nearest-neighbor distance between two point sets:
/// `½ mean_a min_b |a-b| + ½ mean_b min_a |a-b|`.
pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoSurface);
    }
    let ta = KdTree::new(a);
    let tb = KdTree::new(b);
    Ok(0.5 * mean_nearest(&tb, a) + 0.5 * mean_nearest(&ta, b))
}

/// Chamfer-L1 measured against surfaces rather than point samples:
/// `n` area-uniform points on `mesh` are scored by their exact distance to
/// the reference surface, and `n` points on the reference by their exact
/// distance to `mesh`.
pub fn surface_chamfer_l1(mesh: &TriMesh, reference: &dyn SdfOracle, n: usize, rng: &mut Rng) -> Result<f64> {
    if mesh.is_empty() {
        return Err(Error::NoSurface);
    }
    let (pts, _) = mesh.sample_surface(n, &mut rng.substream("mesh-samples"))?;
    let mut rr = rng.substream("reference-samples");
    let refs: Vec<Vec3> = (0..n).map(|_| reference.sample_surface(&mut rr)).collect();
    let sdf = MeshSdf::new(mesh.clone())?;
    let chunks = n.div_ceil(QUERY_CHUNK);
    let range = |c: usize| c * QUERY_CHUNK..((c + 1) * QUERY_CHUNK).min(n);
    let to_ref: f64 = map_chunks(chunks, |c| pts[range(c)].iter().map(|&p| reference.sdf(p).abs()).sum::<f64>())
        .iter()
        .sum();
    let to_mesh: f64 = map_chunks(chunks, |c| refs[range(c)].iter().map(|&p| sdf.unsigned_distance(p)).sum::<f64>())
        .iter()
        .sum();
    Ok(0.5 * (to_ref + to_mesh) / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalMetrics {
    /// Mean `|cos|` between normals at corresponding points.
    pub nc: f64,
    /// Mean angle `acos |cos|` in degrees.
    pub nae_deg: f64,
}

fn directed_normals(from: &TriMesh, to: &MeshSdf, n: usize, rng: &mut Rng) -> Result<(f64, f64)> {
    let (pts, normals) = from.sample_surface(n, rng)?;
    let chunks = n.div_ceil(QUERY_CHUNK);
    let parts = map_chunks(chunks, |c| {
        let mut cos_sum = 0.0;
        let mut ang_sum = 0.0;
        for i in c * QUERY_CHUNK..((c + 1) * QUERY_CHUNK).min(n) {
            let hit = to.closest(pts[i]);
            let c = dot(normals[i], to.mesh().face_normal(hit.face as usize)).abs().min(1.0);
            cos_sum += c;
            ang_sum += c.acos().to_degrees();
        }
        (cos_sum, ang_sum)
    });
    let (c, a) = parts.iter().fold((0.0, 0.0), |(x, y), (c, a)| (x + c, y + a));
    Ok((c / n as f64, a / n as f64))
}

/// Normal consistency and normal angular error, averaged over both
/// directions: each sampled point is matched to the closest point of the
/// other mesh and the face normals are compared.
pub fn normal_metrics(a: &TriMesh, b: &TriMesh, n: usize, rng: &mut Rng) -> Result<NormalMetrics> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::NoSurface);
    }
    let sa = MeshSdf::new(a.clone())?;
    let sb = MeshSdf::new(b.clone())?;
    let (c1, a1) = directed_normals(a, &sb, n, &mut rng.substream("a"))?;
    let (c2, a2) = directed_normals(b, &sa, n, &mut rng.substream("b"))?;
    Ok(NormalMetrics {
        nc: 0.5 * (c1 + c2),
        nae_deg: 0.5 * (a1 + a2),
    })
}

/// IoU of the regions where each field is negative, sampled at the centers
/// of an `R^3` grid of cells over the unit cube. Two empty regions give 1.
pub fn volumetric_iou<A, B>(fa: &A, fb: &B, res: usize) -> Result<f64>
where
    A: Fn(&[Vec3], &mut [f64]) + Sync,
    B: Fn(&[Vec3], &mut [f64]) + Sync,
{
    if res < 16 {
        return Err(Error::OutOfRange {
            what: "IoU resolution",
            value: res.to_string(),
            allowed: ">= 16".into(),
        });
    }
    let h = 1.0 / res as f64;
    let counts = map_chunks(res, |z| {
        let mut pts = Vec::with_capacity(res * res);
        for y in 0..res {
            for x in 0..res {
                pts.push([(x as f64 + 0.5) * h, (y as f64 + 0.5) * h, (z as f64 + 0.5) * h]);
            }
        }
        let mut va = vec![0.0; pts.len()];
        let mut vb = vec![0.0; pts.len()];
        fa(&pts, &mut va);
        fb(&pts, &mut vb);
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in va.iter().zip(&vb) {
            let (ia, ib) = (*a < 0.0, *b < 0.0);
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
        (inter, union)
    });
    let (inter, union) = counts.iter().fold((0, 0), |(i, u), (a, b)| (i + a, u + b));
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = Rng::new(1);
        let pts: Vec<Vec3> = (0..2000).map(|_| [rng.uniform(), rng.uniform(), rng.uniform()]).collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = [rng.uniform_in(-0.2, 1.2), rng.uniform(), rng.uniform()];
            let brute = pts
                .iter()
                .map(|p| {
                    let d = sub(q, *p);
                    dot(d, d)
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_dist2(q), brute);
        }
    }

    #[test]
    fn chamfer_basics() {
        let mut rng = Rng::new(2);
        let a: Vec<Vec3> = (0..500).map(|_| [rng.uniform(), rng.uniform(), 0.0]).collect();
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec3> = (0..700).map(|_| [rng.uniform(), rng.uniform(), 0.3]).collect();
        assert_eq!(chamfer_l1(&a, &b).unwrap(), chamfer_l1(&b, &a).unwrap());
        assert!(matches!(chamfer_l1(&[], &b), Err(Error::NoSurface)));
    }
}
