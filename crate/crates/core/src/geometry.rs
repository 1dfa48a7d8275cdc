//! Grasp representations, the Euler-angle convention and region frames.
//!
//! Every rotation in the crate goes through [`euler_to_rotation`], which uses
//! the intrinsic convention `R = Rz(theta) * Ry(beta) * Rx(gamma)`:
//!
//! * `theta` is the in-plane rotation about the camera viewing axis,
//! * `beta` tilts the closing axis out of the image plane,
//! * `gamma` rotates the approach direction about the closing axis.
//!
//! In the gripper frame the closing axis is `x` (column 0 of `R`), the finger
//! thickness axis is `y` and the approach axis is `z`. With all three angles
//! inside `[-pi/2, pi/2]` the approach always has a non-negative component
//! along the camera `z` axis.
//!
//! Region frames are translation-only: local axes stay parallel to the camera
//! axes, so grasp angles are identical in both frames.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Radius within which training labels are kept around a region center, and
/// the normalisation scale of predicted offsets.
pub const LABEL_RADIUS: f64 = 0.02;

/// Default maximum gripper opening in meters.
pub const DEFAULT_MAX_WIDTH: f64 = 0.10;

const GIMBAL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is gimbal-degenerate (|beta| = pi/2)")]
    GimbalDegenerate,
}

/// A grasp in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp {
    pub t: Vec3,
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub width: f64,
    pub score: f64,
}

impl Grasp {
    pub fn rotation(&self) -> Mat3 {
        euler_to_rotation(self.theta, self.gamma, self.beta)
    }

    /// Unit closing direction of the jaws.
    pub fn closing_axis(&self) -> Vec3 {
        self.rotation().column(0).into_owned()
    }

    /// Checks the representation invariants against a maximum width.
    pub fn is_valid(&self, max_width: f64) -> bool {
        let angle_ok = |a: f64| a.is_finite() && (-FRAC_PI_2..=FRAC_PI_2).contains(&a);
        self.t.iter().all(|v| v.is_finite())
            && angle_ok(self.theta)
            && angle_ok(self.gamma)
            && angle_ok(self.beta)
            && (0.0..=max_width).contains(&self.width)
            && (0.0..=1.0).contains(&self.score)
    }
}

/// JSON record of a grasp: `{"t":[x,y,z],"euler":[theta,gamma,beta],"width":w,"score":s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub t: [f64; 3],
    pub euler: [f64; 3],
    pub width: f64,
    pub score: f64,
}

impl From<&Grasp> for GraspRecord {
    fn from(g: &Grasp) -> Self {
        GraspRecord {
            t: [g.t.x, g.t.y, g.t.z],
            euler: [g.theta, g.gamma, g.beta],
            width: g.width,
            score: g.score,
        }
    }
}

impl From<&GraspRecord> for Grasp {
    fn from(r: &GraspRecord) -> Self {
        Grasp {
            t: Vec3::new(r.t[0], r.t[1], r.t[2]),
            theta: r.euler[0],
            gamma: r.euler[1],
            beta: r.euler[2],
            width: r.width,
            score: r.score,
        }
    }
}

impl Serialize for Grasp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraspRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grasp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        GraspRecord::deserialize(d).map(|r| Grasp::from(&r))
    }
}

/// A grasp expressed relative to its region center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionalGrasp {
    pub dt: Vec3,
    pub theta: f64,
    pub gamma: f64,
    pub beta: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionFrame {
    pub center: Vec3,
    pub source_pixel: Option<(u32, u32)>,
}

impl RegionFrame {
    pub fn new(center: Vec3) -> Self {
        RegionFrame {
            center,
            source_pixel: None,
        }
    }

    pub fn with_pixel(center: Vec3, pixel: (u32, u32)) -> Self {
        RegionFrame {
            center,
            source_pixel: Some(pixel),
        }
    }
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Rz(theta) * Ry(beta) * Rx(gamma)`.
pub fn euler_to_rotation(theta: f64, gamma: f64, beta: f64) -> Mat3 {
    rot_z(theta) * rot_y(beta) * rot_x(gamma)
}

/// Inverse of [`euler_to_rotation`], returning `(theta, gamma, beta)`.
pub fn rotation_to_euler(r: &Mat3) -> Result<(f64, f64, f64), GeometryError> {
    let sin_beta = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let cos_beta = r[(0, 0)].hypot(r[(1, 0)]);
    if cos_beta < GIMBAL_TOLERANCE {
        return Err(GeometryError::GimbalDegenerate);
    }
    let beta = sin_beta.atan2(cos_beta);
    let theta = r[(1, 0)].atan2(r[(0, 0)]);
    let gamma = r[(2, 1)].atan2(r[(2, 2)]);
    Ok((theta, gamma, beta))
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_distance(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn to_local_frame(points: &[Vec3], frame: &RegionFrame) -> Vec<Vec3> {
    points.iter().map(|p| p - frame.center).collect()
}

pub fn to_camera_frame(points: &[Vec3], frame: &RegionFrame) -> Vec<Vec3> {
    points.iter().map(|p| p + frame.center).collect()
}

/// Places a regional grasp in the camera frame. The score is left at zero for
/// the caller to attach.
pub fn compose_final_grasp(gp: &RegionalGrasp, frame: &RegionFrame) -> Grasp {
    Grasp {
        t: frame.center + gp.dt,
        theta: gp.theta,
        gamma: gp.gamma,
        beta: gp.beta,
        width: gp.width,
        score: 0.0,
    }
}

/// Inverse of [`compose_final_grasp`].
pub fn regional_from_grasp(g: &Grasp, frame: &RegionFrame) -> RegionalGrasp {
    RegionalGrasp {
        dt: g.t - frame.center,
        theta: g.theta,
        gamma: g.gamma,
        beta: g.beta,
        width: g.width,
    }
}
