//! Depth back-projection and the two sampling kernels used throughout the
//! pipeline: furthest point sampling and capped ball query.

use crate::geometry::Vec3;
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("depth image is {got_w}x{got_h}, intrinsics expect {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("no points inside the query ball")]
    NoNeighbors,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pinhole intrinsics plus the metric scale of stored depth values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CloudError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CloudError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CloudError::InvalidIntrinsics("image size must be positive".into()));
        }
        if !(self.depth_scale > 0.0) {
            return Err(CloudError::InvalidIntrinsics("depth_scale must be positive".into()));
        }
        Ok(())
    }

    /// Back-projects pixel `(u, v)` at metric depth `z`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Continuous pinhole projection; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Projection rounded to the nearest pixel, `None` when outside the image.
    pub fn project_pixel(&self, p: &Vec3) -> Option<(u32, u32)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as u32, v as u32))
    }

    pub fn load(path: &Path) -> Result<Self, CloudError> {
        let intr: Intrinsics = serde_json::from_slice(&std::fs::read(path)?)?;
        intr.validate()?;
        Ok(intr)
    }

    pub fn save(&self, path: &Path) -> Result<(), CloudError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Row-major 16-bit depth image; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> u16 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, d: u16) {
        self.data[v as usize * self.width as usize + u as usize] = d;
    }

    pub fn load_png(path: &Path) -> Result<Self, CloudError> {
        let img = image::open(path)?.into_luma16();
        Ok(DepthImage {
            width: img.width(),
            height: img.height(),
            data: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), CloudError> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .expect("buffer matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub pixel_of: Option<Vec<(u32, u32)>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn depth_to_cloud(depth: &DepthImage, intr: &Intrinsics) -> Result<PointCloud, CloudError> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(CloudError::DimensionMismatch {
            got_w: depth.width,
            got_h: depth.height,
            want_w: intr.width,
            want_h: intr.height,
        });
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d == 0 {
                continue;
            }
            let z = d as f64 * intr.depth_scale;
            points.push(intr.back_project(u as f64, v as f64, z));
            pixels.push((u, v));
        }
    }
    Ok(PointCloud {
        points,
        pixel_of: Some(pixels),
    })
}

/// A back-projected depth image that remembers which point each pixel produced.
#[derive(Debug, Clone)]
pub struct SceneCloud {
    pub cloud: PointCloud,
    pub intrinsics: Intrinsics,
    lookup: Vec<u32>,
}

impl SceneCloud {
    const INVALID: u32 = u32::MAX;

    pub fn from_depth(depth: &DepthImage, intr: &Intrinsics) -> Result<Self, CloudError> {
        let cloud = depth_to_cloud(depth, intr)?;
        let mut lookup = vec![Self::INVALID; depth.data.len()];
        if let Some(pixels) = &cloud.pixel_of {
            for (i, &(u, v)) in pixels.iter().enumerate() {
                lookup[v as usize * intr.width as usize + u as usize] = i as u32;
            }
        }
        Ok(SceneCloud {
            cloud,
            intrinsics: *intr,
            lookup,
        })
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    pub fn points(&self) -> &[Vec3] {
        &self.cloud.points
    }

    /// Index of the point produced by pixel `(u, v)`, if the pixel had valid depth.
    pub fn point_at(&self, u: u32, v: u32) -> Option<usize> {
        if u >= self.width() || v >= self.height() {
            return None;
        }
        let idx = self.lookup[v as usize * self.width() as usize + u as usize];
        (idx != Self::INVALID).then_some(idx as usize)
    }

    pub fn pixel_of(&self, index: usize) -> (u32, u32) {
        self.cloud.pixel_of.as_ref().expect("scene clouds carry pixels")[index]
    }
}

#[inline]
pub fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Index of the point closest to `center`; ties go to the lowest index.
pub fn nearest_index(points: &[Vec3], center: &Vec3) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, center);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy furthest point sampling starting at `seed_index`.
///
/// Each step adds the unselected point whose distance to the selected set is
/// largest, breaking ties by lowest index. Requesting `m >= n` returns every
/// index; once only duplicates of selected points remain they follow in index
/// order.
pub fn farthest_point_sample(
    points: &[Vec3],
    m: usize,
    seed_index: usize,
) -> Result<Vec<usize>, CloudError> {
    let n = points.len();
    if n == 0 || m == 0 {
        return Err(CloudError::EmptyInput);
    }
    assert!(seed_index < n, "seed index {seed_index} out of range for {n} points");
    let m = m.min(n);
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    min_d[current] = f64::NEG_INFINITY;
    while selected.len() < m {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let md = &mut min_d[i];
            if *md == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(p, &c);
            if d < *md {
                *md = d;
            }
            if *md > best_d || best == usize::MAX {
                best_d = *md;
                best = i;
            }
        }
        current = best;
        min_d[current] = f64::NEG_INFINITY;
        selected.push(current);
    }
    Ok(selected)
}

/// All indices within `radius` of `center`. When more than `cap` qualify the
/// set is reduced by furthest point sampling seeded at the in-ball point
/// nearest the center; the result is then in sampling order, otherwise in
/// index order.
pub fn ball_query(
    points: &[Vec3],
    center: &Vec3,
    radius: f64,
    cap: usize,
) -> Result<Vec<usize>, CloudError> {
    assert!(radius > 0.0 && cap >= 1, "ball query needs radius > 0 and cap >= 1");
    let r2 = radius * radius;
    let inside: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| dist2(p, center) <= r2)
        .map(|(i, _)| i)
        .collect();
    if inside.is_empty() {
        return Err(CloudError::NoNeighbors);
    }
    if inside.len() <= cap {
        return Ok(inside);
    }
    let subset: Vec<Vec3> = inside.iter().map(|&i| points[i]).collect();
    let seed = nearest_index(&subset, center).expect("non-empty");
    let picked = farthest_point_sample(&subset, cap, seed)?;
    Ok(picked.into_iter().map(|j| inside[j]).collect())
}
