//! Force-closure scoring of detected grasps and the AP / target-oriented AP
//! protocols.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

use crate::geometry::{Grasp, Vec3};
use crate::shapes::{Primitive, Shape};

pub const DEFAULT_GRADES: [f64; 6] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.2];
/// Finger extent along the approach axis.
pub const FINGER_DEPTH: f64 = 0.02;
/// Finger extent along the gripper `y` axis.
pub const FINGER_THICKNESS: f64 = 0.01;
/// How far outside the open jaws a surface point may lie and still count as
/// touched.
pub const CONTACT_TOLERANCE: f64 = 0.005;
pub const SURFACE_SAMPLES: usize = 2000;
pub const AP_TOP_K: usize = 50;
pub const TOAP_TOP_K: usize = 10;
pub const TAU_TARGET: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no valid contact pair")]
    NoContact,
    #[error("unknown target object {0}")]
    UnknownTarget(u32),
}

/// An object's sampled surface with unit outward normals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalObject {
    pub object_id: u32,
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Analytic solid, used for the target distance test when present.
    pub shape: Option<Shape>,
}

impl EvalObject {
    pub fn from_primitive(p: &Primitive, samples: usize) -> Self {
        let (points, normals) = p.shape.sample_surface(samples).into_iter().unzip();
        EvalObject {
            object_id: p.id,
            points,
            normals,
            shape: Some(p.shape),
        }
    }

    /// Distance from `q` to the object: analytic when the solid is known,
    /// otherwise to the nearest surface sample.
    pub fn distance(&self, q: &Vec3) -> f64 {
        match &self.shape {
            Some(s) => s.distance(q),
            None => self
                .points
                .iter()
                .map(|p| (p - q).norm())
                .fold(f64::INFINITY, f64::min),
        }
    }
}

pub fn eval_objects(prims: &[Primitive]) -> Vec<EvalObject> {
    prims.iter().map(|p| EvalObject::from_primitive(p, SURFACE_SAMPLES)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    pub point: Vec3,
    pub normal: Vec3,
}

/// Two jaw contacts on one object plus the closing axis they were found on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPair {
    pub contacts: [Contact; 2],
    pub axis: Vec3,
    pub object_id: u32,
}

/// Closes the jaws along the grasp's closing axis. On each side the contact is
/// the surface point inside the finger slab that the finger reaches first.
pub fn find_contacts(grasp: &Grasp, objects: &[EvalObject]) -> Result<ContactPair, EvalError> {
    let r = grasp.rotation();
    let rt = r.transpose();
    let half_open = 0.5 * grasp.width + CONTACT_TOLERANCE;
    // (|q_x|, lateral^2, object, index) per side
    let mut best: [Option<(f64, f64, usize, usize)>; 2] = [None, None];
    for (oi, obj) in objects.iter().enumerate() {
        for (pi, p) in obj.points.iter().enumerate() {
            let q = rt * (p - grasp.t);
            if q.y.abs() > 0.5 * FINGER_THICKNESS || q.z.abs() > 0.5 * FINGER_DEPTH || q.x.abs() > half_open {
                continue;
            }
            let side = usize::from(q.x < 0.0);
            let cand = (q.x.abs(), q.y * q.y + q.z * q.z, oi, pi);
            let better = match best[side] {
                None => true,
                Some(b) => cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1),
            };
            if better {
                best[side] = Some(cand);
            }
        }
    }
    let (Some(a), Some(b)) = (best[0], best[1]) else {
        return Err(EvalError::NoContact);
    };
    if a.2 != b.2 {
        return Err(EvalError::NoContact);
    }
    let obj = &objects[a.2];
    let contact = |i: usize| Contact {
        point: obj.points[i],
        normal: obj.normals[i],
    };
    Ok(ContactPair {
        contacts: [contact(a.3), contact(b.3)],
        axis: r.column(0).into_owned(),
        object_id: obj.object_id,
    })
}

/// Angle between a contact normal and the closing line (either direction).
pub fn cone_angle(normal: &Vec3, axis: &Vec3) -> f64 {
    let c = normal.dot(axis).abs() / (normal.norm() * axis.norm());
    c.clamp(0.0, 1.0).acos()
}

/// Two-finger antipodal test: both normals within `atan(mu)` of the axis.
pub fn force_closure(pair: &ContactPair, mu: f64) -> bool {
    let limit = mu.atan();
    pair.contacts.iter().all(|c| cone_angle(&c.normal, &pair.axis) <= limit)
}

/// Smallest grade at which the pair is in force closure.
pub fn min_grade(pair: &ContactPair, grades: &[f64]) -> Option<f64> {
    grades.iter().copied().find(|&mu| force_closure(pair, mu))
}

/// Precision@k averaged over `k = 1..=k_max`; ranks past the end count as
/// failures.
pub fn ap_from_successes(success: &[bool], k_max: usize) -> f64 {
    if k_max == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for k in 1..=k_max {
        if success.get(k - 1).copied().unwrap_or(false) {
            hits += 1;
        }
        sum += hits as f64 / k as f64;
    }
    sum / k_max as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    /// `(mu, AP at mu)` in grade order.
    pub per_grade: Vec<(f64, f64)>,
    pub evaluated: usize,
}

fn report_from(pairs: &[Result<ContactPair, EvalError>], k_max: usize, grades: &[f64], target: Option<u32>) -> ApReport {
    let per_grade: Vec<(f64, f64)> = grades
        .iter()
        .map(|&mu| {
            let success: Vec<bool> = pairs
                .iter()
                .map(|p| match p {
                    Ok(pair) => target.is_none_or(|t| pair.object_id == t) && force_closure(pair, mu),
                    Err(_) => false,
                })
                .collect();
            (mu, ap_from_successes(&success, k_max))
        })
        .collect();
    let ap = if per_grade.is_empty() {
        0.0
    } else {
        per_grade.iter().map(|(_, a)| a).sum::<f64>() / per_grade.len() as f64
    };
    ApReport {
        ap,
        per_grade,
        evaluated: pairs.len(),
    }
}

/// Scene AP of ranked detections (already NMS'd, best first).
pub fn average_precision(detections: &[Grasp], objects: &[EvalObject], k_max: usize, grades: &[f64]) -> ApReport {
    let pairs: Vec<_> = detections
        .iter()
        .take(k_max)
        .map(|g| find_contacts(g, objects))
        .collect();
    report_from(&pairs, k_max, grades, None)
}

/// AP restricted to detections within `tau` of the target object, where a
/// success also needs both contacts on the target. Precision is averaged over
/// the ranks actually filled (at most `k_max`), so a short on-target list is
/// not padded with failures.
pub fn target_oriented_ap(
    detections: &[Grasp],
    objects: &[EvalObject],
    target_id: u32,
    k_max: usize,
    tau: f64,
    grades: &[f64],
) -> Result<ApReport, EvalError> {
    let target = objects
        .iter()
        .find(|o| o.object_id == target_id)
        .ok_or(EvalError::UnknownTarget(target_id))?;
    let pairs: Vec<_> = detections
        .iter()
        .filter(|g| target.distance(&g.t) <= tau)
        .take(k_max)
        .map(|g| find_contacts(g, objects))
        .collect();
    Ok(report_from(&pairs, pairs.len(), grades, Some(target_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene: String,
    pub ap: f64,
    pub per_grade: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub toap: Option<f64>,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub per_grade: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub toap: Option<f64>,
    pub per_scene: Vec<SceneEval>,
}

fn grade_key(mu: f64) -> String {
    format!("{mu:.1}")
}

impl SceneEval {
    pub fn new(scene: &str, report: &ApReport, toap: Option<f64>) -> Self {
        SceneEval {
            scene: scene.to_string(),
            ap: report.ap,
            per_grade: report.per_grade.iter().map(|(m, a)| (grade_key(*m), *a)).collect(),
            toap,
            detections: report.evaluated,
        }
    }
}

impl EvalReport {
    /// Averages scene results; merging is a plain mean so order does not
    /// matter.
    pub fn from_scenes(per_scene: Vec<SceneEval>) -> Self {
        let n = per_scene.len().max(1) as f64;
        let ap = per_scene.iter().map(|s| s.ap).sum::<f64>() / n;
        let mut per_grade: BTreeMap<String, f64> = BTreeMap::new();
        for s in &per_scene {
            for (k, v) in &s.per_grade {
                *per_grade.entry(k.clone()).or_default() += v / n;
            }
        }
        let toaps: Vec<f64> = per_scene.iter().filter_map(|s| s.toap).collect();
        let toap = (!toaps.is_empty()).then(|| toaps.iter().sum::<f64>() / toaps.len() as f64);
        EvalReport {
            ap,
            per_grade,
            toap,
            per_scene,
        }
    }

    /// One row per (scene, grade).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,grade,ap\n");
        for sc in &self.per_scene {
            for (g, v) in &sc.per_grade {
                writeln!(s, "{},{},{}", sc.scene, g, v).unwrap();
            }
        }
        s
    }
}
