//! Bounding volume hierarchy over triangles and the signed distance to a mesh.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::mesh::TriMesh;
use super::{add, cross, dot, normalize, scale, sub, Vec3};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Clone, Copy, Debug)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// First child for interior nodes, first triangle slot for leaves.
    first: u32,
    /// Triangle count; zero marks an interior node.
    count: u32,
}

/// Median-split BVH over the faces of a mesh.
#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<u32>,
}

/// Part of a triangle that holds the closest point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Feature {
    Face,
    /// Mesh vertex ids, smaller first.
    Edge(u32, u32),
    Vertex(u32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestHit {
    pub dist2: f64,
    pub point: Vec3,
    pub face: u32,
    pub feature: Feature,
}

fn box_dist2(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let mut d = 0.0;
    for j in 0..3 {
        let e = (lo[j] - p[j]).max(0.0).max(p[j] - hi[j]);
        d += e * e;
    }
    d
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let n = mesh.faces.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let centroids: Vec<Vec3> = (0..n)
            .map(|f| {
                let [a, b, c] = mesh.triangle(f);
                scale(add(add(a, b), c), 1.0 / 3.0)
            })
            .collect();
        let bounds = |slice: &[u32]| {
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for &f in slice {
                for v in mesh.triangle(f as usize) {
                    for j in 0..3 {
                        lo[j] = lo[j].min(v[j]);
                        hi[j] = hi[j].max(v[j]);
                    }
                }
            }
            (lo, hi)
        };
        let mut nodes = Vec::with_capacity(2 * n / LEAF_SIZE + 1);
        let (lo, hi) = bounds(&order);
        nodes.push(Node {
            lo,
            hi,
            first: 0,
            count: n as u32,
        });
        let mut stack = vec![(0usize, 0usize, n)];
        while let Some((node, start, end)) = stack.pop() {
            if end - start <= LEAF_SIZE {
                continue;
            }
            // split on the longest axis of the centroid bounds
            let mut clo = [f64::INFINITY; 3];
            let mut chi = [f64::NEG_INFINITY; 3];
            for &f in &order[start..end] {
                let c = centroids[f as usize];
                for j in 0..3 {
                    clo[j] = clo[j].min(c[j]);
                    chi[j] = chi[j].max(c[j]);
                }
            }
            let axis = (0..3)
                .max_by(|&a, &b| (chi[a] - clo[a]).total_cmp(&(chi[b] - clo[b])))
                .unwrap_or(0);
            let mid = (start + end) / 2;
            order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
                centroids[a as usize][axis]
                    .total_cmp(&centroids[b as usize][axis])
                    .then(a.cmp(&b))
            });
            let left = nodes.len();
            for (s, e) in [(start, mid), (mid, end)] {
                let (lo, hi) = bounds(&order[s..e]);
                nodes.push(Node {
                    lo,
                    hi,
                    first: s as u32,
                    count: (e - s) as u32,
                });
            }
            nodes[node].first = left as u32;
            nodes[node].count = 0;
            stack.push((left, start, mid));
            stack.push((left + 1, mid, end));
        }
        Self { nodes, order }
    }

    /// Closest point on the mesh to `p`.
    pub fn closest(&self, mesh: &TriMesh, p: Vec3) -> Option<ClosestHit> {
        if self.order.is_empty() {
            return None;
        }
        let mut best: Option<ClosestHit> = None;
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![(0usize, box_dist2(p, self.nodes[0].lo, self.nodes[0].hi))];
        while let Some((ni, d2)) = stack.pop() {
            if d2 >= best_d2 {
                continue;
            }
            let node = self.nodes[ni];
            if node.count > 0 {
                for &f in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    let tri = mesh.triangle(f as usize);
                    let (q, region) = closest_point_region(p, tri);
                    let d = sub(p, q);
                    let dd = dot(d, d);
                    if dd < best_d2 {
                        best_d2 = dd;
                        let ids = mesh.faces[f as usize];
                        let feature = match region {
                            Region::Face => Feature::Face,
                            Region::Vertex(k) => Feature::Vertex(ids[k]),
                            Region::Edge(a, b) => {
                                let (x, y) = (ids[a], ids[b]);
                                Feature::Edge(x.min(y), x.max(y))
                            }
                        };
                        best = Some(ClosestHit {
                            dist2: dd,
                            point: q,
                            face: f,
                            feature,
                        });
                    }
                }
            } else {
                let l = node.first as usize;
                let dl = box_dist2(p, self.nodes[l].lo, self.nodes[l].hi);
                let dr = box_dist2(p, self.nodes[l + 1].lo, self.nodes[l + 1].hi);
                if dl < dr {
                    stack.push((l + 1, dr));
                    stack.push((l, dl));
                } else {
                    stack.push((l, dl));
                    stack.push((l + 1, dr));
                }
            }
        }
        best
    }

    /// Number of triangles hit by the ray `o + t d`, `t > 0`.
    pub fn count_hits(&self, mesh: &TriMesh, o: Vec3, d: Vec3) -> usize {
        if self.order.is_empty() {
            return 0;
        }
        let inv = [1.0 / d[0], 1.0 / d[1], 1.0 / d[2]];
        let mut hits = 0;
        let mut stack = vec![0usize];
        while let Some(ni) = stack.pop() {
            let node = self.nodes[ni];
            if !ray_box(o, inv, node.lo, node.hi) {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.first as usize..(node.first + node.count) as usize] {
                    if ray_triangle(o, d, mesh.triangle(f as usize)) {
                        hits += 1;
                    }
                }
            } else {
                stack.push(node.first as usize);
                stack.push(node.first as usize + 1);
            }
        }
        hits
    }
}

fn ray_box(o: Vec3, inv: Vec3, lo: Vec3, hi: Vec3) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for j in 0..3 {
        let a = (lo[j] - o[j]) * inv[j];
        let b = (hi[j] - o[j]) * inv[j];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t0 <= t1
}

fn ray_triangle(o: Vec3, d: Vec3, [a, b, c]: [Vec3; 3]) -> bool {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let pv = cross(d, e2);
    let det = dot(e1, pv);
    if det.abs() < 1e-300 {
        return false;
    }
    let inv = 1.0 / det;
    let tv = sub(o, a);
    let u = dot(tv, pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = cross(tv, e1);
    let v = dot(d, qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    dot(e2, qv) * inv > 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Region {
    Face,
    Edge(usize, usize),
    Vertex(usize),
}

/// Closest point on triangle `abc` to `p` and the Voronoi region it lies in.
pub(crate) fn closest_point_region(p: Vec3, [a, b, c]: [Vec3; 3]) -> (Vec3, Region) {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Region::Vertex(0));
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Region::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (add(a, scale(ab, v)), Region::Edge(0, 1));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Region::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (add(a, scale(ac, w)), Region::Edge(0, 2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (add(b, scale(sub(c, b), w)), Region::Edge(1, 2));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (add(a, add(scale(ab, v), scale(ac, w))), Region::Face)
}

/// Closest point on triangle `tri` to `p`.
pub fn closest_point_on_triangle(p: Vec3, tri: [Vec3; 3]) -> Vec3 {
    closest_point_region(p, tri).0
}

/// Signed distance to a triangle mesh.
///
/// The sign comes from the angle-weighted pseudonormal of the closest
/// feature. Where that feature touches a non-manifold edge, the sign is
/// decided by a vote of three ray-parity tests instead; such queries are
/// counted in [`fallbacks`](MeshSdf::fallbacks).
pub struct MeshSdf {
    mesh: TriMesh,
    bvh: Bvh,
    vertex_normal: Vec<Vec3>,
    vertex_manifold: Vec<bool>,
    edge_normal: HashMap<(u32, u32), (Vec3, u32)>,
    fallbacks: AtomicUsize,
}

const VOTE_DIRS: [Vec3; 3] = [
    [0.577_350_3, 0.577_350_2, 0.577_350_3],
    [-0.267_261_2, 0.534_522_5, 0.801_783_7],
    [0.872_871_6, -0.218_217_9, -0.436_435_8],
];

impl MeshSdf {
    pub fn new(mesh: TriMesh) -> Result<Self> {
        if mesh.faces.is_empty() {
            return Err(Error::NoSurface);
        }
        let bvh = Bvh::build(&mesh);
        let mut vertex_normal = vec![[0.0; 3]; mesh.vertices.len()];
        let mut edge_normal: HashMap<(u32, u32), (Vec3, u32)> = HashMap::new();
        for (f, ids) in mesh.faces.iter().enumerate() {
            let n = mesh.face_normal(f);
            let tri = mesh.triangle(f);
            for k in 0..3 {
                let e1 = normalize(sub(tri[(k + 1) % 3], tri[k]));
                let e2 = normalize(sub(tri[(k + 2) % 3], tri[k]));
                let angle = dot(e1, e2).clamp(-1.0, 1.0).acos();
                let v = &mut vertex_normal[ids[k] as usize];
                *v = add(*v, scale(n, angle));
                let (a, b) = (ids[k], ids[(k + 1) % 3]);
                let e = edge_normal.entry((a.min(b), a.max(b))).or_insert(([0.0; 3], 0));
                e.0 = add(e.0, n);
                e.1 += 1;
            }
        }
        let mut vertex_manifold = vec![true; mesh.vertices.len()];
        for (&(a, b), &(_, count)) in &edge_normal {
            if count != 2 {
                vertex_manifold[a as usize] = false;
                vertex_manifold[b as usize] = false;
            }
        }
        Ok(Self {
            mesh,
            bvh,
            vertex_normal,
            vertex_manifold,
            edge_normal,
            fallbacks: AtomicUsize::new(0),
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn closest(&self, p: Vec3) -> ClosestHit {
        self.bvh.closest(&self.mesh, p).expect("mesh is non-empty")
    }

    pub fn unsigned_distance(&self, p: Vec3) -> f64 {
        self.closest(p).dist2.sqrt()
    }

    /// Queries whose sign came from ray parity.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let hit = self.closest(p);
        let d = hit.dist2.sqrt();
        if d == 0.0 {
            return 0.0;
        }
        let pseudo = match hit.feature {
            Feature::Face => Some(self.mesh.face_cross(hit.face as usize)),
            Feature::Edge(a, b) => match self.edge_normal.get(&(a, b)) {
                Some(&(n, 2)) => Some(n),
                _ => None,
            },
            Feature::Vertex(v) => self.vertex_manifold[v as usize].then(|| self.vertex_normal[v as usize]),
        };
        let side = pseudo.map(|n| dot(sub(p, hit.point), n)).filter(|s| *s != 0.0);
        let inside = match side {
            Some(s) => s < 0.0,
            None => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                self.parity_inside(p)
            }
        };
        if inside {
            -d
        } else {
            d
        }
    }

    fn parity_inside(&self, p: Vec3) -> bool {
        let votes = VOTE_DIRS
            .iter()
            .filter(|&&d| self.bvh.count_hits(&self.mesh, p, d) % 2 == 1)
            .count();
        votes >= 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sdf::mesh::unit_cube;
    use crate::sdf::{marching_cubes, norm, SdfOracle, Shape};

    fn brute_closest(mesh: &TriMesh, p: Vec3) -> f64 {
        (0..mesh.faces.len())
            .map(|f| norm(sub(p, closest_point_on_triangle(p, mesh.triangle(f)))))
            .fold(f64::INFINITY, f64::min)
    }

    /// Generalized winding number: ~1 inside a closed outward mesh, ~0 outside.
    fn winding(mesh: &TriMesh, p: Vec3) -> f64 {
        let mut total = 0.0;
        for f in 0..mesh.faces.len() {
            let [a, b, c] = mesh.triangle(f).map(|v| sub(v, p));
            let (la, lb, lc) = (norm(a), norm(b), norm(c));
            let num = dot(a, cross(b, c));
            let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    #[test]
    fn triangle_regions() {
        let tri = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(closest_point_on_triangle(p3(-1.0, -1.0, 0.0), tri), tri[0]);
        let q = closest_point_on_triangle(p3(0.2, 0.2, 5.0), tri);
        assert!((q[0] - 0.2).abs() < 1e-15 && (q[1] - 0.2).abs() < 1e-15 && q[2] == 0.0);
        let q = closest_point_on_triangle(p3(1.0, 1.0, 0.0), tri);
        assert!((q[0] - 0.5).abs() < 1e-15 && (q[1] - 0.5).abs() < 1e-15);
    }

    fn p3(x: f64, y: f64, z: f64) -> Vec3 {
        [x, y, z]
    }

    #[test]
    fn cube_distances() {
        let sdf = MeshSdf::new(unit_cube()).unwrap();
        assert_eq!(sdf.signed_distance([0.0, 0.0, 0.0]), 0.0);
        assert!((sdf.signed_distance([0.5; 3]) + 0.5).abs() < 1e-12);
        assert!((sdf.signed_distance([2.0, 0.5, 0.5]) - 1.0).abs() < 1e-12);
        // outside a corner: the closest feature is a vertex
        assert!((sdf.signed_distance([2.0, 2.0, 2.0]) - 3f64.sqrt()).abs() < 1e-12);
        // outside an edge
        assert!((sdf.signed_distance([1.5, 1.5, 0.5]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(sdf.fallbacks(), 0);
        assert!(MeshSdf::new(TriMesh::default()).is_err());
    }

    #[test]
    fn matches_brute_force_on_small_mesh() {
        let s = Shape::Torus {
            center: [0.5; 3],
            major: 0.3,
            minor: 0.12,
        };
        let mesh = marching_cubes(
            &|pts: &[Vec3], out: &mut [f64]| {
                for (p, o) in pts.iter().zip(out.iter_mut()) {
                    *o = s.sdf(*p);
                }
            },
            12,
            0.0,
        )
        .unwrap();
        assert!(mesh.faces.len() > 300 && mesh.faces.len() < 1500, "{}", mesh.faces.len());
        let sdf = MeshSdf::new(mesh.clone()).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let p = [rng.uniform_in(-0.1, 1.1), rng.uniform_in(-0.1, 1.1), rng.uniform_in(-0.1, 1.1)];
            let got = sdf.signed_distance(p);
            let dist = brute_closest(&mesh, p);
            let sign = if winding(&mesh, p) > 0.5 { -1.0 } else { 1.0 };
            assert!((got - sign * dist).abs() < 1e-6, "{p:?}: {got} vs {}", sign * dist);
        }
    }

    #[test]
    fn non_manifold_falls_back_to_parity() {
        // two cubes sharing only an edge
        let a = unit_cube();
        let b = a.transformed(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [1.0, 1.0, 0.0]);
        let mut vertices = a.vertices.clone();
        let mut faces = a.faces.clone();
        let remap: Vec<u32> = b
            .vertices
            .iter()
            .map(|v| match vertices.iter().position(|w| w == v) {
                Some(i) => i as u32,
                None => {
                    vertices.push(*v);
                    (vertices.len() - 1) as u32
                }
            })
            .collect();
        faces.extend(b.faces.iter().map(|f| f.map(|i| remap[i as usize])));
        let sdf = MeshSdf::new(TriMesh::new(vertices, faces).unwrap()).unwrap();
        // the shared vertex (1, 1, 1) is the closest feature
        let d = sdf.signed_distance([1.0, 1.0, 1.3]);
        assert!((d - 0.3).abs() < 1e-12);
        assert_eq!(sdf.fallbacks(), 1);
        assert!((sdf.signed_distance([1.5, 1.5, 0.5]) + 0.5).abs() < 1e-12);
    }
}
