//! Signed distance ground truth, iso-surface extraction and geometry metrics.

mod bvh;
mod mc;
mod mesh;
mod metrics;

pub use bvh::{closest_point_on_triangle, Bvh, ClosestHit, Feature, MeshSdf};
pub use mc::{marching_cubes, marching_cubes_lattice, sample_lattice, CASE_TABLE};
pub use mesh::{load_mesh, save_mesh, TriMesh};
pub use metrics::{
    chamfer_l1, normal_metrics, surface_chamfer_l1, volumetric_iou, NormalMetrics,
};

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::model::FieldModel;
use crate::numerics::{Real, Rng};

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

/// Ground-truth signed distance (negative inside) with area-uniform surface
/// sampling.
pub trait SdfOracle: Sync {
    fn sdf(&self, p: Vec3) -> f64;
    fn sample_surface(&self, rng: &mut Rng) -> Vec3;
}

/// Analytic primitives. The torus ring lies in the plane normal to z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Torus {
        center: Vec3,
        major: f64,
        minor: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    Capsule {
        a: Vec3,
        b: Vec3,
        radius: f64,
    },
    Union {
        parts: Vec<Shape>,
    },
}

impl Shape {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::InvalidConfig(m.into()));
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => bad("sphere radius must be > 0"),
            Shape::Torus { major, minor, .. } if !(*minor > 0.0 && *major > *minor) => {
                bad("torus needs major > minor > 0")
            }
            Shape::Box { half_extents, .. } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                bad("box half extents must be > 0")
            }
            Shape::Capsule { radius, a, b } if !(*radius > 0.0) || a == b => {
                bad("capsule needs radius > 0 and distinct end points")
            }
            Shape::Union { parts } if parts.is_empty() => bad("union needs at least one part"),
            Shape::Union { parts } => parts.iter().try_for_each(Shape::validate),
            _ => Ok(()),
        }
    }

    /// Exact surface area.
    pub fn area(&self) -> f64 {
        match self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Torus { major, minor, .. } => 4.0 * PI * PI * major * minor,
            Shape::Box { half_extents: h, .. } => 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2]),
            Shape::Capsule { a, b, radius } => {
                2.0 * PI * radius * norm(sub(*b, *a)) + 4.0 * PI * radius * radius
            }
            Shape::Union { parts } => parts.iter().map(Shape::area).sum(),
        }
    }

    fn sample_part(&self, rng: &mut Rng) -> Vec3 {
        match self {
            Shape::Sphere { center, radius } => add(*center, scale(rng.unit_vector(), *radius)),
            Shape::Torus { center, major, minor } => loop {
                let u = rng.uniform_in(0.0, 2.0 * PI);
                let v = rng.uniform_in(0.0, 2.0 * PI);
                // surface element is proportional to major + minor cos v
                if rng.uniform() * (major + minor) <= major + minor * v.cos() {
                    let ring = major + minor * v.cos();
                    break add(*center, [ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                }
            },
            Shape::Box { center, half_extents: h } => {
                let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
                let total = areas.iter().sum::<f64>();
                let mut pick = rng.uniform() * total;
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let mut p = [0.0; 3];
                for j in 0..3 {
                    p[j] = if j == axis {
                        side * h[j]
                    } else {
                        rng.uniform_in(-h[j], h[j])
                    };
                }
                add(*center, p)
            }
            Shape::Capsule { a, b, radius } => {
                let axis = sub(*b, *a);
                let len = norm(axis);
                let dir = scale(axis, 1.0 / len);
                if rng.uniform() * (len + 2.0 * radius) < len {
                    let (e1, e2) = orthonormal_basis(dir);
                    let t = rng.uniform() * len;
                    let phi = rng.uniform_in(0.0, 2.0 * PI);
                    let radial = add(scale(e1, phi.cos() * radius), scale(e2, phi.sin() * radius));
                    add(add(*a, scale(dir, t)), radial)
                } else {
                    let u = rng.unit_vector();
                    let cap = if dot(u, dir) >= 0.0 { *b } else { *a };
                    add(cap, scale(u, *radius))
                }
            }
            Shape::Union { .. } => unreachable!("unions are sampled part by part"),
        }
    }
}

fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalize(cross(n, helper));
    (e1, cross(n, e1))
}

impl SdfOracle for Shape {
    fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => norm(sub(p, *center)) - radius,
            Shape::Torus { center, major, minor } => {
                let d = sub(p, *center);
                let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major;
                (ring * ring + d[2] * d[2]).sqrt() - minor
            }
            Shape::Box { center, half_extents } => {
                let d = sub(p, *center);
                let q = [
                    d[0].abs() - half_extents[0],
                    d[1].abs() - half_extents[1],
                    d[2].abs() - half_extents[2],
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Shape::Capsule { a, b, radius } => {
                let pa = sub(p, *a);
                let ba = sub(*b, *a);
                let h = (dot(pa, ba) / dot(ba, ba)).clamp(0.0, 1.0);
                norm(sub(pa, scale(ba, h))) - radius
            }
            Shape::Union { parts } => parts.iter().map(|s| s.sdf(p)).fold(f64::INFINITY, f64::min),
        }
    }

    fn sample_surface(&self, rng: &mut Rng) -> Vec3 {
        let Shape::Union { parts } = self else {
            return self.sample_part(rng);
        };
        let areas: Vec<f64> = parts.iter().map(Shape::area).collect();
        let total: f64 = areas.iter().sum();
        loop {
            let mut pick = rng.uniform() * total;
            let mut idx = parts.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    idx = i;
                    break;
                }
                pick -= a;
            }
            let p = parts[idx].sample_surface(rng);
            // keep only points not buried inside another part
            let buried = parts
                .iter()
                .enumerate()
                .any(|(j, s)| j != idx && s.sdf(p) < 0.0);
            if !buried {
                return p;
            }
        }
    }
}

/// Batch evaluator of a trained SDF model using its first `levels` levels.
pub fn model_field<T: Real>(
    model: &FieldModel<T>,
    levels: usize,
) -> impl Fn(&[Vec3], &mut [f64]) + Sync + '_ {
    move |pts, out| {
        let flat: Vec<T> = pts.iter().flat_map(|p| p.iter().map(|&x| T::lit(x))).collect();
        let v = model.query_levels(&flat, levels).expect("points match the model dimension");
        for (o, x) in out.iter_mut().zip(v) {
            *o = x.as_f64();
        }
    }
}

/// Batch evaluator of a ground-truth SDF.
pub fn oracle_field(oracle: &dyn SdfOracle) -> impl Fn(&[Vec3], &mut [f64]) + Sync + '_ {
    move |pts, out| {
        for (o, p) in out.iter_mut().zip(pts) {
            *o = oracle.sdf(*p);
        }
    }
}

/// A mesh as ground truth: BVH distances, pseudonormal signs and
/// area-weighted surface sampling.
pub struct MeshOracle {
    sdf: MeshSdf,
    cumulative: Vec<f64>,
}

impl MeshOracle {
    pub fn new(mesh: TriMesh) -> crate::Result<Self> {
        let sdf = MeshSdf::new(mesh)?;
        let mut acc = 0.0;
        let cumulative = (0..sdf.mesh().faces.len())
            .map(|f| {
                acc += sdf.mesh().face_area(f);
                acc
            })
            .collect();
        Ok(Self { sdf, cumulative })
    }

    pub fn mesh_sdf(&self) -> &MeshSdf {
        &self.sdf
    }
}

impl SdfOracle for MeshOracle {
    fn sdf(&self, p: Vec3) -> f64 {
        self.sdf.signed_distance(p)
    }

    fn sample_surface(&self, rng: &mut Rng) -> Vec3 {
        self.sdf.mesh().sample_on_face(&self.cumulative, rng).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        let s = Shape::Sphere {
            center: [0.5; 3],
            radius: 0.3,
        };
        assert!((s.sdf([0.5; 3]) + 0.3).abs() < 1e-15);
        assert!((s.sdf([1.0, 0.5, 0.5]) - 0.2).abs() < 1e-15);
        let t = Shape::Torus {
            center: [0.5; 3],
            major: 0.3,
            minor: 0.1,
        };
        assert!((t.sdf([0.5; 3]) - 0.2).abs() < 1e-15);
        assert!((t.sdf([0.8, 0.5, 0.5]) + 0.1).abs() < 1e-15);
        let b = Shape::Box {
            center: [0.5; 3],
            half_extents: [0.5; 3],
        };
        assert!((b.sdf([0.5; 3]) + 0.5).abs() < 1e-15);
        assert!((b.sdf([1.5, 1.5, 0.5]) - 2f64.sqrt() * 0.5).abs() < 1e-12);
        let c = Shape::Capsule {
            a: [0.3, 0.5, 0.5],
            b: [0.7, 0.5, 0.5],
            radius: 0.1,
        };
        assert!((c.sdf([0.5, 0.5, 0.5]) + 0.1).abs() < 1e-15);
        assert!((c.sdf([0.9, 0.5, 0.5]) - 0.1).abs() < 1e-12);
        let u = Shape::Union {
            parts: vec![s.clone(), c.clone()],
        };
        assert_eq!(u.sdf([0.5; 3]), -0.3);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let err = serde_json::from_str::<Shape>(r#"{"kind":"cone","radius":1}"#);
        assert!(err.is_err());
        let ok: Shape = serde_json::from_str(r#"{"kind":"sphere","center":[0.5,0.5,0.5],"radius":0.3}"#).unwrap();
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn surface_samples_lie_on_surface() {
        let shapes = [
            Shape::Sphere {
                center: [0.5; 3],
                radius: 0.3,
            },
            Shape::Torus {
                center: [0.5; 3],
                major: 0.3,
                minor: 0.1,
            },
            Shape::Box {
                center: [0.5; 3],
                half_extents: [0.2, 0.1, 0.3],
            },
            Shape::Capsule {
                a: [0.3, 0.4, 0.5],
                b: [0.7, 0.6, 0.5],
                radius: 0.1,
            },
            Shape::Union {
                parts: vec![
                    Shape::Sphere {
                        center: [0.4; 3],
                        radius: 0.2,
                    },
                    Shape::Sphere {
                        center: [0.6; 3],
                        radius: 0.2,
                    },
                ],
            },
        ];
        let mut rng = Rng::new(4);
        for s in &shapes {
            for _ in 0..2000 {
                let p = s.sample_surface(&mut rng);
                assert!(s.sdf(p).abs() < 1e-12, "{s:?}");
            }
        }
    }

    #[test]
    fn torus_sampling_is_area_uniform() {
        // the outer half (cos v > 0) carries (π + 2r/R)/(2π) of the area
        let (major, minor) = (0.3, 0.1);
        let t = Shape::Torus {
            center: [0.0; 3],
            major,
            minor,
        };
        let mut rng = Rng::new(8);
        let n = 200_000;
        let outer = (0..n)
            .filter(|_| {
                let p = t.sample_surface(&mut rng);
                (p[0] * p[0] + p[1] * p[1]).sqrt() > major
            })
            .count();
        let expect = (PI + 2.0 * minor / major) / (2.0 * PI);
        assert!((outer as f64 / n as f64 - expect).abs() < 5e-3);
    }
}
