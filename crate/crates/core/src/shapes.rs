//! Analytic primitives used by the synthetic scenes and the evaluator.
//!
//! All shapes stand on a table plane `z = table_z` in the camera frame (the
//! camera looks down `+z`), so they extend towards the camera from there.
//! Cylinders are upright (axis parallel to `z`); boxes may be yawed about `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::geometry::{rot_z, Vec3};

const RAY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box { center: [f64; 3], half: [f64; 3], yaw: f64 },
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
    Sphere { center: [f64; 3], radius: f64 },
}

/// A scene object: instance id plus its solid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: u32,
    #[serde(flatten)]
    pub shape: Shape,
}

/// Entry and exit of a ray through a convex solid, with outward normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t_in: f64,
    pub n_in: Vec3,
    pub t_out: f64,
    pub n_out: Vec3,
}

fn v(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Slab intersection of a ray with an axis-aligned box centred at the origin.
fn slab(o: Vec3, d: Vec3, half: Vec3) -> Option<(f64, Vec3, f64, Vec3)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut n0 = Vec3::zeros();
    let mut n1 = Vec3::zeros();
    for k in 0..3 {
        if d[k].abs() < RAY_EPS {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let b = (half[k] - o[k]) / d[k];
        let (near, far, sign) = if a < b { (a, b, -1.0) } else { (b, a, 1.0) };
        if near > t0 {
            t0 = near;
            n0 = Vec3::zeros();
            n0[k] = sign;
        }
        if far < t1 {
            t1 = far;
            n1 = Vec3::zeros();
            n1[k] = -sign;
        }
    }
    (t0 <= t1).then_some((t0, n0, t1, n1))
}

impl Shape {
    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Box { center, .. } | Shape::Cylinder { center, .. } | Shape::Sphere { center, .. } => v(center),
        }
    }

    /// Radius of the bounding circle in the table plane.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Box { half, .. } => half[0].hypot(half[1]),
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius, .. } => radius,
        }
    }

    /// Intersection interval of the infinite line `o + t d` (`d` unit).
    pub fn ray_interval(&self, o: &Vec3, d: &Vec3) -> Option<RayHit> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = o - v(center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let (t_in, t_out) = (-b - s, -b + s);
                Some(RayHit {
                    t_in,
                    n_in: (o + d * t_in - v(center)) / radius,
                    t_out,
                    n_out: (o + d * t_out - v(center)) / radius,
                })
            }
            Shape::Box { center, half, yaw } => {
                let r = rot_z(yaw);
                let lo = r.transpose() * (o - v(center));
                let ld = r.transpose() * d;
                let (t_in, n_in, t_out, n_out) = slab(lo, ld, v(half))?;
                Some(RayHit {
                    t_in,
                    n_in: r * n_in,
                    t_out,
                    n_out: r * n_out,
                })
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let oc = o - v(center);
                // caps
                let (mut t0, mut t1, mut n0, mut n1) = if d.z.abs() < RAY_EPS {
                    if oc.z.abs() > half_height {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY, Vec3::zeros(), Vec3::zeros())
                } else {
                    let a = (-half_height - oc.z) / d.z;
                    let b = (half_height - oc.z) / d.z;
                    if a < b {
                        (a, b, -Vec3::z(), Vec3::z())
                    } else {
                        (b, a, Vec3::z(), -Vec3::z())
                    }
                };
                // side
                let qa = d.x * d.x + d.y * d.y;
                let qb = oc.x * d.x + oc.y * d.y;
                let qc = oc.x * oc.x + oc.y * oc.y - radius * radius;
                if qa < RAY_EPS {
                    if qc > 0.0 {
                        return None;
                    }
                } else {
                    let disc = qb * qb - qa * qc;
                    if disc < 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    let (a, b) = ((-qb - s) / qa, (-qb + s) / qa);
                    let radial = |t: f64| {
                        let p = oc + d * t;
                        Vec3::new(p.x, p.y, 0.0) / radius
                    };
                    if a > t0 {
                        t0 = a;
                        n0 = radial(a);
                    }
                    if b < t1 {
                        t1 = b;
                        n1 = radial(b);
                    }
                }
                (t0 <= t1).then_some(RayHit {
                    t_in: t0,
                    n_in: n0,
                    t_out: t1,
                    n_out: n1,
                })
            }
        }
    }

    /// First surface hit in front of `o` along unit `d`.
    pub fn ray_cast(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let h = self.ray_interval(o, d)?;
        if h.t_in > RAY_EPS {
            Some((h.t_in, h.n_in))
        } else if h.t_out > RAY_EPS {
            Some((h.t_out, h.n_out))
        } else {
            None
        }
    }

    /// Euclidean distance from `p` to the solid (zero inside).
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => ((p - v(center)).norm() - radius).max(0.0),
            Shape::Box { center, half, yaw } => {
                let q = rot_z(yaw).transpose() * (p - v(center));
                let e = Vec3::new(
                    (q.x.abs() - half[0]).max(0.0),
                    (q.y.abs() - half[1]).max(0.0),
                    (q.z.abs() - half[2]).max(0.0),
                );
                e.norm()
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let q = p - v(center);
                let r = (q.x.hypot(q.y) - radius).max(0.0);
                let z = (q.z.abs() - half_height).max(0.0);
                r.hypot(z)
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Box { half, .. } => 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]),
            Shape::Cylinder {
                radius, half_height, ..
            } => 2.0 * PI * radius * radius + 4.0 * PI * radius * half_height,
        }
    }

    /// Area-uniform random surface point and its outward normal.
    pub fn random_surface_point<R: Rng>(&self, rng: &mut R) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let s = (1.0 - z * z).sqrt();
                let n = Vec3::new(s * phi.cos(), s * phi.sin(), z);
                (v(center) + n * radius, n)
            }
            Shape::Box { center, half, yaw } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut q = Vec3::zeros();
                let mut n = Vec3::zeros();
                for k in 0..3 {
                    q[k] = if k == axis {
                        sign * half[k]
                    } else {
                        rng.random_range(-half[k]..half[k])
                    };
                }
                n[axis] = sign;
                let r = rot_z(yaw);
                (v(center) + r * q, r * n)
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let cap = PI * radius * radius;
                let side = 2.0 * PI * radius * 2.0 * half_height;
                let pick = rng.random_range(0.0..2.0 * cap + side);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                if pick < side {
                    let z = rng.random_range(-half_height..half_height);
                    let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
                    (v(center) + Vec3::new(radius * n.x, radius * n.y, z), n)
                } else {
                    let sign = if pick < side + cap { 1.0 } else { -1.0 };
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let p = Vec3::new(r * phi.cos(), r * phi.sin(), sign * half_height);
                    (v(center) + p, Vec3::new(0.0, 0.0, sign))
                }
            }
        }
    }

    /// Deterministic, roughly area-uniform surface samples with unit normals.
    pub fn sample_surface(&self, count: usize) -> Vec<(Vec3, Vec3)> {
        let count = count.max(1);
        match *self {
            Shape::Sphere { center, radius } => {
                let golden = PI * (3.0 - 5f64.sqrt());
                (0..count)
                    .map(|i| {
                        let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                        let s = (1.0 - z * z).sqrt();
                        let phi = golden * i as f64;
                        let n = Vec3::new(s * phi.cos(), s * phi.sin(), z);
                        (v(center) + n * radius, n)
                    })
                    .collect()
            }
            Shape::Box { center, half, yaw } => {
                let r = rot_z(yaw);
                let spacing = (self.area() / count as f64).sqrt();
                let mut out = Vec::with_capacity(count);
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    let na = ((2.0 * half[a] / spacing).round() as usize).max(1);
                    let nb = ((2.0 * half[b] / spacing).round() as usize).max(1);
                    for sign in [-1.0, 1.0] {
                        for i in 0..na {
                            for j in 0..nb {
                                let mut q = Vec3::zeros();
                                q[axis] = sign * half[axis];
                                q[a] = -half[a] + (i as f64 + 0.5) * 2.0 * half[a] / na as f64;
                                q[b] = -half[b] + (j as f64 + 0.5) * 2.0 * half[b] / nb as f64;
                                let mut n = Vec3::zeros();
                                n[axis] = sign;
                                out.push((v(center) + r * q, r * n));
                            }
                        }
                    }
                }
                out
            }
            Shape::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let spacing = (self.area() / count as f64).sqrt();
                let ring = ((2.0 * PI * radius / spacing).round() as usize).max(3);
                let rows = ((2.0 * half_height / spacing).round() as usize).max(1);
                let cap_n = ((PI * radius * radius / (spacing * spacing)).round() as usize).max(1);
                let mut out = Vec::with_capacity(2 * cap_n + ring * rows);
                for i in 0..rows {
                    let z = -half_height + (i as f64 + 0.5) * 2.0 * half_height / rows as f64;
                    for j in 0..ring {
                        let phi = 2.0 * PI * j as f64 / ring as f64;
                        let n = Vec3::new(phi.cos(), phi.sin(), 0.0);
                        out.push((v(center) + Vec3::new(radius * n.x, radius * n.y, z), n));
                    }
                }
                let golden = PI * (3.0 - 5f64.sqrt());
                for sign in [-1.0, 1.0] {
                    for i in 0..cap_n {
                        let r = radius * ((i as f64 + 0.5) / cap_n as f64).sqrt();
                        let phi = golden * i as f64;
                        let p = Vec3::new(r * phi.cos(), r * phi.sin(), sign * half_height);
                        out.push((v(center) + p, Vec3::new(0.0, 0.0, sign)));
                    }
                }
                out
            }
        }
    }
}

impl Primitive {
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.shape.distance(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shapes() -> Vec<Shape> {
        vec![
            Shape::Box {
                center: [0.01, -0.02, 0.5],
                half: [0.03, 0.02, 0.025],
                yaw: 0.4,
            },
            Shape::Cylinder {
                center: [0.0, 0.0, 0.52],
                radius: 0.025,
                half_height: 0.03,
            },
            Shape::Sphere {
                center: [0.02, 0.01, 0.5],
                radius: 0.03,
            },
        ]
    }

    #[test]
    fn down_ray_hits_top() {
        let b = Shape::Box {
            center: [0.0, 0.0, 0.5],
            half: [0.03, 0.03, 0.03],
            yaw: 0.0,
        };
        let (t, n) = b.ray_cast(&Vec3::zeros(), &Vec3::z()).unwrap();
        assert!((t - 0.47).abs() < 1e-12);
        assert_eq!(n, -Vec3::z());
        let c = Shape::Cylinder {
            center: [0.0, 0.0, 0.5],
            radius: 0.02,
            half_height: 0.04,
        };
        let (t, n) = c.ray_cast(&Vec3::zeros(), &Vec3::z()).unwrap();
        assert!((t - 0.46).abs() < 1e-12);
        assert_eq!(n, -Vec3::z());
        assert!(c.ray_cast(&Vec3::new(0.1, 0.0, 0.0), &Vec3::z()).is_none());
    }

    #[test]
    fn hits_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in shapes() {
            for _ in 0..200 {
                let o = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
                let d = (s.center() + Vec3::new(rng.random_range(-0.02..0.02), 0.0, 0.0) - o).normalize();
                if let Some(h) = s.ray_interval(&o, &d) {
                    for (t, n) in [(h.t_in, h.n_in), (h.t_out, h.n_out)] {
                        let p = o + d * t;
                        assert!(s.distance(&p) < 1e-9);
                        assert!(s.distance(&(p + n * 1e-4)) > 5e-5);
                        assert!((n.norm() - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn surface_samples_are_on_surface_with_unit_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for s in shapes() {
            let samples = s.sample_surface(2000);
            assert!(samples.len() > 1500 && samples.len() < 2600, "{}", samples.len());
            for (p, n) in samples.iter().chain(&(0..500).map(|_| s.random_surface_point(&mut rng)).collect::<Vec<_>>()) {
                assert!(s.distance(p) < 1e-9);
                assert!((n.norm() - 1.0).abs() < 1e-9);
                assert!(s.distance(&(p + n * 1e-3)) > 9e-4);
            }
        }
    }

    #[test]
    fn distance_is_zero_inside() {
        for s in shapes() {
            assert_eq!(s.distance(&s.center()), 0.0);
        }
        let sp = Shape::Sphere {
            center: [0.0, 0.0, 0.0],
            radius: 0.1,
        };
        assert!((sp.distance(&Vec3::new(0.3, 0.0, 0.0)) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn json_tags_kind() {
        let p = Primitive {
            id: 3,
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.5],
                radius: 0.02,
            },
        };
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"kind\":\"sphere\""));
        assert_eq!(serde_json::from_str::<Primitive>(&s).unwrap(), p);
    }
}
