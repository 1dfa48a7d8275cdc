//! Synthetic table-top scenes with analytic antipodal grasp labels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use super::{mix_seed, DatagenError};
use crate::cloud::{DepthImage, Intrinsics};
use crate::eval::{min_grade, Contact, ContactPair, DEFAULT_GRADES};
use crate::geometry::{rotation_to_euler, Grasp, Mat3, Vec3, DEFAULT_MAX_WIDTH};
use crate::scene::{InstanceMask, Scene, SceneLabel, SceneLabels};
use crate::shapes::{Primitive, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub intrinsics: Intrinsics,
    /// Depth of the table plane.
    pub table_z: f64,
    /// Range of box edges and sphere / cylinder diameters.
    pub size_range: (f64, f64),
    /// Minimum free gap between object footprints.
    pub gap: f64,
    pub placement_retries: usize,
    pub grasp_attempts_per_object: usize,
    pub max_width: f64,
    /// Extra opening beyond the contact separation, split over both jaws.
    pub width_clearance: f64,
    pub min_separation: f64,
    /// Pairs are kept when both normals lie within `atan(label_friction)`.
    pub label_friction: f64,
    pub grades: Vec<f64>,
    /// Angular safety margin added before picking the friction grade.
    pub grade_margin: f64,
    /// Maximum distance between a label center and the visible surface point
    /// of the same object at its pixel.
    pub visibility_tolerance: f64,
    /// Range of the approach rotation about the closing axis.
    pub approach_jitter: f64,
    /// Labels whose closing axis has `|x_z|` above this are skipped.
    pub max_axis_elevation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            intrinsics: default_intrinsics(),
            table_z: 0.55,
            size_range: (0.02, 0.08),
            gap: 0.015,
            placement_retries: 500,
            grasp_attempts_per_object: 600,
            max_width: DEFAULT_MAX_WIDTH,
            width_clearance: 0.004,
            min_separation: 0.005,
            label_friction: 0.4,
            grades: DEFAULT_GRADES.to_vec(),
            grade_margin: 5f64.to_radians(),
            visibility_tolerance: 0.018,
            approach_jitter: 45f64.to_radians(),
            max_axis_elevation: 0.9,
        }
    }
}

/// 256 x 200 pinhole camera with 0.1 mm depth units.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 220.0,
        fy: 220.0,
        cx: 128.0,
        cy: 100.0,
        width: 256,
        height: 200,
        depth_scale: 0.0001,
    }
}

fn random_shape<R: Rng>(rng: &mut R, cfg: &SynthConfig, x: f64, y: f64) -> Shape {
    let (lo, hi) = cfg.size_range;
    let z = cfg.table_z;
    match rng.random_range(0..3) {
        0 => {
            let half = [
                0.5 * rng.random_range(lo..hi),
                0.5 * rng.random_range(lo..hi),
                0.5 * rng.random_range(lo..hi),
            ];
            Shape::Box {
                center: [x, y, z - half[2]],
                half,
                yaw: rng.random_range(-PI / 2.0..PI / 2.0),
            }
        }
        1 => {
            let radius = 0.5 * rng.random_range(lo..hi);
            let half_height = 0.5 * rng.random_range(lo..hi);
            Shape::Cylinder {
                center: [x, y, z - half_height],
                radius,
                half_height,
            }
        }
        _ => {
            let radius = 0.5 * rng.random_range(lo..hi);
            Shape::Sphere {
                center: [x, y, z - radius],
                radius,
            }
        }
    }
}

/// Random non-overlapping primitives resting on the table inside the view.
pub fn place_objects<R: Rng>(rng: &mut R, count: usize, cfg: &SynthConfig) -> Result<Vec<Primitive>, DatagenError> {
    let intr = &cfg.intrinsics;
    let half_x = 0.5 * intr.width as f64 / intr.fx * cfg.table_z * 0.8;
    let half_y = 0.5 * intr.height as f64 / intr.fy * cfg.table_z * 0.8;
    let ox = (intr.width as f64 / 2.0 - intr.cx) / intr.fx * cfg.table_z;
    let oy = (intr.height as f64 / 2.0 - intr.cy) / intr.fy * cfg.table_z;
    let mut placed: Vec<Primitive> = Vec::with_capacity(count);
    for id in 0..count {
        let mut ok = false;
        for _ in 0..cfg.placement_retries {
            let probe = random_shape(rng, cfg, 0.0, 0.0);
            let r = probe.footprint_radius();
            if r >= half_x.min(half_y) {
                continue;
            }
            let x = ox + rng.random_range(-half_x + r..half_x - r);
            let y = oy + rng.random_range(-half_y + r..half_y - r);
            let shape = match probe {
                Shape::Box { center, half, yaw } => Shape::Box {
                    center: [x, y, center[2]],
                    half,
                    yaw,
                },
                Shape::Cylinder {
                    center,
                    radius,
                    half_height,
                } => Shape::Cylinder {
                    center: [x, y, center[2]],
                    radius,
                    half_height,
                },
                Shape::Sphere { center, radius } => Shape::Sphere {
                    center: [x, y, center[2]],
                    radius,
                },
            };
            let clear = placed.iter().all(|p| {
                let c = p.shape.center();
                (c.x - x).hypot(c.y - y) >= p.shape.footprint_radius() + r + cfg.gap
            });
            if clear {
                placed.push(Primitive { id: id as u32, shape });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(DatagenError::PlacementFailure { placed: placed.len(), requested: count });
        }
    }
    Ok(placed)
}

/// Ray casts the table and objects: depth image plus instance mask.
pub fn render(objects: &[Primitive], cfg: &SynthConfig) -> (DepthImage, InstanceMask) {
    let intr = &cfg.intrinsics;
    let mut depth = DepthImage::new(intr.width, intr.height);
    let mut mask = InstanceMask::new(intr.width, intr.height);
    let origin = Vec3::zeros();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir = Vec3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0).normalize();
            let mut best_t = cfg.table_z / dir.z;
            let mut id = 0u16;
            for o in objects {
                if let Some((t, _)) = o.shape.ray_cast(&origin, &dir) {
                    if t < best_t {
                        best_t = t;
                        id = o.id as u16 + 1;
                    }
                }
            }
            let z = best_t * dir.z;
            let d = (z / intr.depth_scale).round();
            if d >= 1.0 && d <= u16::MAX as f64 {
                depth.set(u, v, d as u16);
                mask.data[v as usize * intr.width as usize + u as usize] = id;
            }
        }
    }
    (depth, mask)
}

/// Direction uniformly distributed in the cone of half-angle `max_angle`
/// around unit `axis`.
fn random_in_cone<R: Rng>(rng: &mut R, axis: &Vec3, max_angle: f64) -> Vec3 {
    let cos_t = rng.random_range(max_angle.cos()..=1.0);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    (axis * cos_t + e1 * (sin_t * phi.cos()) + e2 * (sin_t * phi.sin())).normalize()
}

/// Gripper rotation with closing axis `x` and an approach derived from the
/// camera axis, rotated by `psi` about `x`.
fn grasp_rotation(x: &Vec3, psi: f64) -> Mat3 {
    let base = (Vec3::z() - x * x.z).normalize();
    let side = x.cross(&base);
    let z = base * psi.cos() + side * psi.sin();
    let y = z.cross(x);
    Mat3::from_columns(&[*x, y, z])
}

/// Antipodal labels for one object, checked for visibility against the
/// rendered scene.
fn object_labels<R: Rng>(
    rng: &mut R,
    obj: &Primitive,
    depth: &DepthImage,
    mask: &InstanceMask,
    cfg: &SynthConfig,
) -> Vec<SceneLabel> {
    let intr = &cfg.intrinsics;
    let cone = cfg.label_friction.atan();
    let mut out = Vec::new();
    for _ in 0..cfg.grasp_attempts_per_object {
        let (p1, n1) = obj.shape.random_surface_point(rng);
        let psi = rng.random_range(-cfg.approach_jitter..=cfg.approach_jitter);
        let dir = random_in_cone(rng, &-n1, cone);
        let Some(hit) = obj.shape.ray_interval(&p1, &dir) else {
            continue;
        };
        let sep = hit.t_out;
        if sep < cfg.min_separation || sep + cfg.width_clearance > cfg.max_width {
            continue;
        }
        let p2 = p1 + dir * sep;
        let n2 = hit.n_out;
        let mut x = dir;
        if x.x < 0.0 {
            x = -x;
        }
        if x.z.abs() > cfg.max_axis_elevation {
            continue;
        }
        let pair = ContactPair {
            contacts: [Contact { point: p1, normal: n1 }, Contact { point: p2, normal: n2 }],
            axis: x,
            object_id: obj.id,
        };
        let worst = pair
            .contacts
            .iter()
            .map(|c| crate::eval::cone_angle(&c.normal, &x))
            .fold(0.0, f64::max);
        if worst > cone {
            continue;
        }
        let Some(mu) = cfg.grades.iter().copied().find(|&g| worst + cfg.grade_margin <= g.atan()) else {
            continue;
        };
        debug_assert!(min_grade(&pair, &cfg.grades).is_some_and(|m| m <= mu));
        let center = 0.5 * (p1 + p2);
        let Some((u, v)) = intr.project_pixel(&center) else {
            continue;
        };
        if mask.object_at(u, v) != Some(obj.id) {
            continue;
        }
        let z = depth.get(u, v) as f64 * intr.depth_scale;
        let visible = intr.back_project(u as f64, v as f64, z);
        if (visible - center).norm() > cfg.visibility_tolerance {
            continue;
        }
        let r = grasp_rotation(&x, psi);
        let Ok((theta, gamma, beta)) = rotation_to_euler(&r) else {
            continue;
        };
        let score = (1.1 - mu).clamp(0.0, 1.0);
        out.push(SceneLabel {
            grasp: Grasp {
                t: center,
                theta,
                gamma,
                beta,
                width: sep + cfg.width_clearance,
                score,
            },
            object_id: obj.id,
            mu_min: mu,
            contacts: Some([p1.into(), n1.into(), p2.into(), n2.into()]),
        });
    }
    out
}

/// Renders a scene for given objects and labels it. Deterministic per seed.
pub fn synthesize_with_objects(objects: Vec<Primitive>, cfg: &SynthConfig, seed: u64) -> (Scene, SceneLabels) {
    let (depth, mask) = render(&objects, cfg);
    let judges = crate::eval::eval_objects(&objects);
    let mut grasps = Vec::new();
    for obj in &objects {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6c61_6265_6c00 + obj.id as u64));
        // keep only labels the evaluator certifies at the recorded grade
        grasps.extend(object_labels(&mut rng, obj, &depth, &mask, cfg).into_iter().filter(|l| {
            crate::eval::find_contacts(&l.grasp, &judges)
                .is_ok_and(|p| p.object_id == l.object_id && min_grade(&p, &cfg.grades).is_some_and(|m| m <= l.mu_min))
        }));
    }
    (
        Scene {
            depth,
            intrinsics: cfg.intrinsics,
            mask,
            objects,
        },
        SceneLabels { grasps },
    )
}

/// Random scene with `object_count` primitives. Deterministic per seed.
pub fn synthesize_scene(seed: u64, object_count: usize, cfg: &SynthConfig) -> Result<(Scene, SceneLabels), DatagenError> {
    if !(1..=12).contains(&object_count) {
        return Err(DatagenError::InvalidConfig(format!("object_count {object_count} outside [1, 12]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x706c_6163_6500));
    let objects = place_objects(&mut rng, object_count, cfg)?;
    Ok(synthesize_with_objects(objects, cfg, seed))
}
