use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{add, cross, dot, norm, scale, sub, Vec3};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    /// Checks indices and drops degenerate faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::format("mesh", format!("face {f:?} indexes past {n} vertices")));
        }
        if vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "mesh vertex".into(),
            });
        }
        let mut mesh = Self { vertices, faces };
        mesh.remove_degenerate();
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Removes faces with repeated indices or zero area; returns how many.
    pub fn remove_degenerate(&mut self) -> usize {
        let before = self.faces.len();
        let verts = &self.vertices;
        self.faces.retain(|f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                let [a, b, c] = f.map(|i| verts[i as usize]);
                norm(cross(sub(b, a), sub(c, a))) > 0.0
            }
        });
        before - self.faces.len()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        self.faces[f].map(|i| self.vertices[i as usize])
    }

    /// Area-weighted (unnormalized) face normal: `(b - a) x (c - a)`.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        super::normalize(self.face_cross(f))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(self.face_cross(f))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Signed enclosed volume; positive when faces wind outward.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for j in 0..3 {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        (lo, hi)
    }

    /// Closed and consistently oriented: every directed edge appears exactly
    /// once and its reverse exactly once.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut directed: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                *directed.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(a, b), &n)| n == 1 && directed.get(&(b, a)) == Some(&1))
    }

    /// Reverses the winding of every face.
    pub fn flipped(&self) -> Self {
        Self {
            vertices: self.vertices.clone(),
            faces: self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect(),
        }
    }

    /// Applies `x -> R x + t` (R row-major).
    pub fn transformed(&self, rot: &[[f64; 3]; 3], t: Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| add(mat_vec(rot, v), t)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Running face-area sums used by [`sample_on_face`](Self::sample_on_face).
    pub fn cumulative_areas(&self) -> Vec<f64> {
        let mut acc = 0.0;
        (0..self.faces.len())
            .map(|f| {
                acc += self.face_area(f);
                acc
            })
            .collect()
    }

    /// One area-uniform surface point and its face normal.
    pub fn sample_on_face(&self, cumulative: &[f64], rng: &mut Rng) -> (Vec3, Vec3) {
        let total = *cumulative.last().expect("mesh has faces");
        let x = rng.uniform() * total;
        let f = cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1);
        let [a, b, c] = self.triangle(f);
        let (mut u, mut v) = (rng.uniform(), rng.uniform());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        let p = add(a, add(scale(sub(b, a), u), scale(sub(c, a), v)));
        (p, self.face_normal(f))
    }

    /// `n` area-uniform surface points with their face normals.
    pub fn sample_surface(&self, n: usize, rng: &mut Rng) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        if self.faces.is_empty() {
            return Err(Error::NoSurface);
        }
        let cumulative = self.cumulative_areas();
        let mut pts = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let (p, nrm) = self.sample_on_face(&cumulative, rng);
            pts.push(p);
            normals.push(nrm);
        }
        Ok((pts, normals))
    }

    pub fn write_obj(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = BufWriter::new(out);
        for v in &self.vertices {
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    }

    /// ASCII OBJ: `v` and `f` records; polygons are fan-triangulated and
    /// `v/vt/vn` and negative indices are accepted.
    pub fn read_obj(input: impl Read) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in BufReader::new(input).lines().enumerate() {
            let line = line.map_err(|e| Error::format("obj", e.to_string()))?;
            let mut parts = line.split_whitespace();
            let bad = |what: &str| Error::format("obj", format!("line {}: {what}", lineno + 1));
            match parts.next() {
                Some("v") => {
                    let mut v = [0.0; 3];
                    for x in &mut v {
                        *x = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad("bad vertex"))?;
                    }
                    vertices.push(v);
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in parts {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            return Err(bad("face index 0"));
                        };
                        if resolved < 0 {
                            return Err(bad("face index out of range"));
                        }
                        idx.push(resolved as u32);
                    }
                    if idx.len() < 3 {
                        return Err(bad("face with fewer than 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    /// Binary little-endian PLY with float vertices and `uchar`/`int` face lists.
    pub fn write_ply(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = BufWriter::new(out);
        write!(
            w,
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.faces.len()
        )?;
        for v in &self.vertices {
            for x in v {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        for f in &self.faces {
            w.write_all(&[3u8])?;
            for i in f {
                w.write_all(&(*i as i32).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_ply(input: impl Read) -> Result<Self> {
        let mut r = BufReader::new(input);
        let header = read_ply_header(&mut r)?;
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for el in &header {
            match el.name.as_str() {
                "vertex" => {
                    let pos: Vec<usize> = ["x", "y", "z"]
                        .iter()
                        .map(|n| el.props.iter().position(|p| p.name == *n))
                        .collect::<Option<_>>()
                        .ok_or_else(|| Error::format("ply", "vertex element lacks x/y/z"))?;
                    vertices.reserve(el.count);
                    for _ in 0..el.count {
                        let mut vals = vec![0.0; el.props.len()];
                        for (k, p) in el.props.iter().enumerate() {
                            if p.list.is_some() {
                                skip_list(&mut r, p)?;
                            } else {
                                vals[k] = read_scalar(&mut r, p.ty)?;
                            }
                        }
                        vertices.push([vals[pos[0]], vals[pos[1]], vals[pos[2]]]);
                    }
                }
                "face" => {
                    for _ in 0..el.count {
                        for p in &el.props {
                            match p.list {
                                Some(len_ty) if p.name == "vertex_indices" || p.name == "vertex_index" => {
                                    let n = read_scalar(&mut r, len_ty)? as usize;
                                    let mut idx = Vec::with_capacity(n);
                                    for _ in 0..n {
                                        let i = read_scalar(&mut r, p.ty)?;
                                        if i < 0.0 {
                                            return Err(Error::format("ply", "negative face index"));
                                        }
                                        idx.push(i as u32);
                                    }
                                    if n < 3 {
                                        return Err(Error::format("ply", "face with fewer than 3 vertices"));
                                    }
                                    for k in 1..n - 1 {
                                        faces.push([idx[0], idx[k], idx[k + 1]]);
                                    }
                                }
                                Some(_) => skip_list(&mut r, p)?,
                                None => {
                                    read_scalar(&mut r, p.ty)?;
                                }
                            }
                        }
                    }
                }
                _ => {
                    for _ in 0..el.count {
                        for p in &el.props {
                            if p.list.is_some() {
                                skip_list(&mut r, p)?;
                            } else {
                                read_scalar(&mut r, p.ty)?;
                            }
                        }
                    }
                }
            }
        }
        Self::new(vertices, faces)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            other => return Err(Error::format("ply", format!("unknown property type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }
}

struct PlyProp {
    name: String,
    ty: PlyType,
    /// Count type for list properties.
    list: Option<PlyType>,
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

fn read_ply_header(r: &mut impl BufRead) -> Result<Vec<PlyElement>> {
    let mut line = String::new();
    let mut next = |r: &mut dyn BufRead| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| Error::format("ply", e.to_string()))?;
        if n == 0 {
            return Err(Error::format("ply", "header ends early"));
        }
        Ok(line.trim_end().to_string())
    };
    if next(r)? != "ply" {
        return Err(Error::format("ply", "missing magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let l = next(r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::format("ply", format!("unsupported format {fmt}")));
                }
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::format("ply", "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", len_ty, ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::format("ply", "property before element"))?;
                el.props.push(PlyProp {
                    name: name.to_string(),
                    ty: PlyType::parse(ty)?,
                    list: Some(PlyType::parse(len_ty)?),
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::format("ply", "property before element"))?;
                el.props.push(PlyProp {
                    name: name.to_string(),
                    ty: PlyType::parse(ty)?,
                    list: None,
                });
            }
            ["end_header"] => return Ok(elements),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(Error::format("ply", format!("unexpected header line {l:?}"))),
        }
    }
}

fn read_scalar(r: &mut impl Read, ty: PlyType) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b[..ty.size()])
        .map_err(|_| Error::format("ply", "truncated body"))?;
    Ok(match ty {
        PlyType::I8 => b[0] as i8 as f64,
        PlyType::U8 => b[0] as f64,
        PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
        PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
        PlyType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        PlyType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        PlyType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        PlyType::F64 => f64::from_le_bytes(b),
    })
}

fn skip_list(r: &mut impl Read, p: &PlyProp) -> Result<()> {
    let n = read_scalar(r, p.list.expect("list property"))? as usize;
    for _ in 0..n {
        read_scalar(r, p.ty)?;
    }
    Ok(())
}

/// Reads `.obj` or `.ply` by extension.
pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match extension(path).as_deref() {
        Some("obj") => TriMesh::read_obj(file),
        Some("ply") => TriMesh::read_ply(file),
        _ => Err(Error::format("mesh", format!("{}: expected .obj or .ply", path.display()))),
    }
}

/// Writes `.obj` or `.ply` by extension.
pub fn save_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    let ext = extension(path);
    if !matches!(ext.as_deref(), Some("obj") | Some("ply")) {
        return Err(Error::format("mesh", format!("{}: expected .obj or .ply", path.display())));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if ext.as_deref() == Some("obj") {
        mesh.write_obj(file)
    } else {
        mesh.write_ply(file)
    };
    res.map_err(|e| Error::io(path, e))
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

#[cfg(test)]
pub(crate) fn unit_cube() -> TriMesh {
    let mut v = Vec::new();
    for i in 0..8u32 {
        v.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
    }
    // outward winding
    let quads = [
        [0, 2, 3, 1],
        [4, 5, 7, 6],
        [0, 1, 5, 4],
        [2, 6, 7, 3],
        [0, 4, 6, 2],
        [1, 3, 7, 5],
    ];
    let mut f = Vec::new();
    for q in quads {
        f.push([q[0], q[1], q[2]]);
        f.push([q[0], q[2], q[3]]);
    }
    TriMesh::new(v, f).unwrap()
}
