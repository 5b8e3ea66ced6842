//! Marching cubes on a regular lattice over the unit cube.
//!
//! The 256-case table is derived at startup rather than transcribed: on each
//! cube face, every maximal run of inside corners is cut off by one segment
//! (so on ambiguous faces the two inside corners stay separated). Segments are
//! chained into closed loops through the cube and fan-triangulated. Because a
//! face's segments depend only on that face's corners, neighboring cells agree
//! and the surface is closed.

use std::collections::HashMap;
use std::sync::LazyLock;

use super::mesh::TriMesh;
use super::Vec3;
use crate::error::{Error, Result};
use crate::par::map_chunks;

/// Corner `c` of a cell sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
/// Edge `e` joins corners `EDGES[e].0` and `EDGES[e].0 | 1 << EDGES[e].1`.
const EDGES: [(u8, u8); 12] = [
    (0, 0),
    (2, 0),
    (4, 0),
    (6, 0),
    (0, 1),
    (1, 1),
    (4, 1),
    (5, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (3, 2),
];

fn edge_between(a: u8, b: u8) -> u8 {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (hi ^ lo).trailing_zeros() as u8;
    EDGES
        .iter()
        .position(|&(c, ax)| c == lo && ax == axis)
        .expect("corners share an edge") as u8
}

/// Corners of the six faces, counter-clockwise seen from outside the cell.
fn faces() -> [[u8; 4]; 6] {
    let mut out = [[0u8; 4]; 6];
    let mut k = 0;
    for axis in 0..3u8 {
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u8 {
            let corner = |du: u8, dw: u8| (side << axis) | (du << u) | (dw << w);
            // (u, w, axis) is right-handed, so this order winds around +axis
            let mut ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                ring.reverse();
            }
            out[k] = ring;
            k += 1;
        }
    }
    out
}

/// Triangles (as edge indices) for each of the 256 inside/outside cases.
/// Bit `c` of the case index is set when corner `c` is inside.
pub static CASE_TABLE: LazyLock<Vec<Vec<[u8; 3]>>> = LazyLock::new(|| (0..256).map(build_case).collect());

fn build_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: u8| (case >> c) & 1 == 1;
    // next[e] = edge that follows e along the surface boundary
    let mut next = [u8::MAX; 12];
    for ring in faces() {
        let flags: Vec<bool> = ring.iter().map(|&c| inside(c)).collect();
        if flags.iter().all(|&f| f) || flags.iter().all(|&f| !f) {
            continue;
        }
        for i in 0..4 {
            // a run of inside corners starts at i
            if flags[i] && !flags[(i + 3) % 4] {
                let mut j = i;
                while flags[(j + 1) % 4] {
                    j = (j + 1) % 4;
                }
                let enter = edge_between(ring[(i + 3) % 4], ring[i]);
                let leave = edge_between(ring[j], ring[(j + 1) % 4]);
                next[leave as usize] = enter;
            }
        }
    }
    let mut tris = Vec::new();
    let mut seen = [false; 12];
    for start in 0..12u8 {
        if next[start as usize] == u8::MAX || seen[start as usize] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !seen[e as usize] {
            seen[e as usize] = true;
            lp.push(e);
            e = next[e as usize];
        }
        for k in 1..lp.len() - 1 {
            tris.push([lp[0], lp[k + 1], lp[k]]);
        }
    }
    tris
}

/// Values of `field` on the `R^3` lattice `x_i = i / (R - 1)`, x fastest.
///
/// `field(points, out)` evaluates a batch; slabs of constant z are evaluated
/// independently and concatenated in order.
pub fn sample_lattice<F>(field: &F, res: usize) -> Result<Vec<f64>>
where
    F: Fn(&[Vec3], &mut [f64]) + Sync,
{
    if res < 2 {
        return Err(Error::OutOfRange {
            what: "lattice resolution",
            value: res.to_string(),
            allowed: ">= 2".into(),
        });
    }
    let h = 1.0 / (res - 1) as f64;
    let slabs = map_chunks(res, |z| {
        let mut pts = Vec::with_capacity(res * res);
        for y in 0..res {
            for x in 0..res {
                pts.push([x as f64 * h, y as f64 * h, z as f64 * h]);
            }
        }
        let mut out = vec![0.0; pts.len()];
        field(&pts, &mut out);
        out
    });
    Ok(slabs.concat())
}

/// Extracts the `iso` level set of a sampled lattice. Corners with value
/// below `iso` are inside; faces wind so their normals point toward
/// increasing values.
pub fn marching_cubes_lattice(values: &[f64], res: usize, iso: f64) -> Result<TriMesh> {
    if res < 2 || values.len() != res * res * res {
        return Err(Error::ShapeMismatch {
            what: "lattice values",
            expected: res * res * res,
            got: values.len(),
        });
    }
    let table = &*CASE_TABLE;
    let h = 1.0 / (res - 1) as f64;
    let idx = |x: usize, y: usize, z: usize| (z * res + y) * res + x;
    let mut vertex_of: HashMap<(usize, u8), u32> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut corner_idx = [0usize; 8];
    let mut corner_val = [0f64; 8];
    for z in 0..res - 1 {
        for y in 0..res - 1 {
            for x in 0..res - 1 {
                let mut case = 0usize;
                for c in 0..8 {
                    let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
                    corner_idx[c] = idx(x + dx, y + dy, z + dz);
                    corner_val[c] = values[corner_idx[c]];
                    if corner_val[c] < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let mut local = [u32::MAX; 12];
                for tri in &table[case] {
                    let mut ids = [0u32; 3];
                    for (k, &e) in tri.iter().enumerate() {
                        if local[e as usize] == u32::MAX {
                            let (c0, axis) = EDGES[e as usize];
                            let c1 = c0 | (1 << axis);
                            let key = (corner_idx[c0 as usize], axis);
                            local[e as usize] = *vertex_of.entry(key).or_insert_with(|| {
                                let (v0, v1) = (corner_val[c0 as usize], corner_val[c1 as usize]);
                                let t = (iso - v0) / (v1 - v0);
                                let mut p = [
                                    (x + (c0 & 1) as usize) as f64 * h,
                                    (y + ((c0 >> 1) & 1) as usize) as f64 * h,
                                    (z + ((c0 >> 2) & 1) as usize) as f64 * h,
                                ];
                                p[axis as usize] += t * h;
                                vertices.push(p);
                                (vertices.len() - 1) as u32
                            });
                        }
                        ids[k] = local[e as usize];
                    }
                    faces.push(ids);
                }
            }
        }
    }
    Ok(TriMesh { vertices, faces })
}

/// Samples `field` on an `R^3` lattice and extracts its `iso` level set.
pub fn marching_cubes<F>(field: &F, res: usize, iso: f64) -> Result<TriMesh>
where
    F: Fn(&[Vec3], &mut [f64]) + Sync,
{
    if res < 8 {
        return Err(Error::OutOfRange {
            what: "marching cubes resolution",
            value: res.to_string(),
            allowed: ">= 8".into(),
        });
    }
    let values = sample_lattice(field, res)?;
    marching_cubes_lattice(&values, res, iso)
}
