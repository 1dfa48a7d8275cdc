//! Flexible guidance: turn scene-level or target-oriented cues into region
//! centers, then crop the local regions around them.

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::cloud::{ball_query, farthest_point_sample, nearest_index, SceneCloud};
use crate::geometry::{to_local_frame, RegionFrame, Vec3};

pub const DEFAULT_GRID_PX: u32 = 12;
pub const DEFAULT_K: usize = 48;
pub const DEFAULT_RADIUS: f64 = 0.08;
/// Regions with fewer points are dropped.
pub const K_MIN: usize = 32;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("heatmap is {got_w}x{got_h}, scene is {want_w}x{want_h}")]
    HeatmapDimMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("target contains no valid depth")]
    EmptyTarget,
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Row-major single-channel map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Heatmap {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f64 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, x: f64) {
        self.data[v as usize * self.width as usize + u as usize] = x;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Reads an 8- or 16-bit grayscale PNG, scaled to `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self, GuidanceError> {
        let img = image::open(path)?;
        let sixteen = matches!(img.color(), image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16);
        let (width, height, data) = if sixteen {
            let g = img.into_luma16();
            let (w, h) = g.dimensions();
            (w, h, g.into_raw().into_iter().map(|x| x as f64 / 65535.0).collect())
        } else {
            let g = img.into_luma8();
            let (w, h) = g.dimensions();
            (w, h, g.into_raw().into_iter().map(|x| x as f64 / 255.0).collect())
        };
        Ok(Heatmap { width, height, data })
    }

    /// Writes an 8-bit PNG scaled by 255.
    pub fn save_png(&self, path: &Path) -> Result<(), GuidanceError> {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(self.width, self.height, raw).expect("buffer matches");
        img.save(path)?;
        Ok(())
    }
}

/// A cropped local region: points in the region frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub frame: RegionFrame,
    pub points: Vec<Vec3>,
    pub radius: f64,
}

/// Regions built for a list of centers plus the indices of dropped centers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionSet {
    pub regions: Vec<Region>,
    /// Index into the input center list for each emitted region.
    pub center_index: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// A scored 3-D point from an external scene-level graspness model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspnessPoint {
    pub p: [f64; 3],
    pub score: f64,
}

/// Target-oriented (local) guidance.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Click { u: u32, v: u32 },
    /// Half-open pixel rectangle `[u0, u1) x [v0, v1)`.
    BBox { u0: u32, v0: u32, u1: u32, v1: u32 },
    Mask { width: u32, height: u32, data: Vec<bool> },
}

#[derive(Deserialize)]
struct TargetFile {
    bbox: Option<[u32; 4]>,
    click: Option<[u32; 2]>,
}

impl Target {
    /// Reads a JSON `{"bbox": [u0, v0, u1, v1]}` / `{"click": [u, v]}` file or
    /// a mask PNG (nonzero = inside).
    pub fn load(path: &Path) -> Result<Self, GuidanceError> {
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            let f: TargetFile = serde_json::from_slice(&std::fs::read(path)?)?;
            return match (f.bbox, f.click) {
                (Some([u0, v0, u1, v1]), None) => Ok(Target::BBox { u0, v0, u1, v1 }),
                (None, Some([u, v])) => Ok(Target::Click { u, v }),
                _ => Err(GuidanceError::InvalidTarget("expected exactly one of bbox or click".into())),
            };
        }
        let img = image::open(path)?.into_luma8();
        let (width, height) = img.dimensions();
        Ok(Target::Mask {
            width,
            height,
            data: img.into_raw().into_iter().map(|x| x > 0).collect(),
        })
    }
}

pub fn load_graspness(path: &Path) -> Result<Vec<GraspnessPoint>, GuidanceError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn frame_at(scene: &SceneCloud, index: usize) -> RegionFrame {
    RegionFrame::with_pixel(scene.points()[index], scene.pixel_of(index))
}

/// One center per `grid_px` cell: the cell's middle pixel, or the valid pixel
/// nearest to it inside the cell. Cells without valid depth are skipped.
pub fn grid_centers(scene: &SceneCloud, grid_px: u32) -> Vec<RegionFrame> {
    assert!(grid_px >= 1);
    let (w, h) = (scene.width(), scene.height());
    let mut out = Vec::new();
    for v0 in (0..h).step_by(grid_px as usize) {
        for u0 in (0..w).step_by(grid_px as usize) {
            let (u1, v1) = ((u0 + grid_px).min(w), (v0 + grid_px).min(h));
            let (cu, cv) = (u0 + (u1 - u0 - 1) / 2, v0 + (v1 - v0 - 1) / 2);
            let pick = scene.point_at(cu, cv).or_else(|| {
                let mut best: Option<(i64, usize)> = None;
                for v in v0..v1 {
                    for u in u0..u1 {
                        if let Some(i) = scene.point_at(u, v) {
                            let du = u as i64 - cu as i64;
                            let dv = v as i64 - cv as i64;
                            let d = du * du + dv * dv;
                            if best.is_none_or(|(bd, _)| d < bd) {
                                best = Some((d, i));
                            }
                        }
                    }
                }
                best.map(|(_, i)| i)
            });
            if let Some(i) = pick {
                out.push(frame_at(scene, i));
            }
        }
    }
    out
}

/// Pixels that are maxima of their `window x window` neighbourhood; on a
/// plateau only the row-major-first pixel survives.
pub fn local_maxima(map: &Heatmap, window: u32) -> Vec<(u32, u32)> {
    let r = (window / 2) as i64;
    let (w, h) = (map.width as i64, map.height as i64);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let x = map.data[(v * w + u) as usize];
            if x <= 0.0 {
                continue;
            }
            let mut keep = true;
            'scan: for dv in -r..=r {
                for du in -r..=r {
                    let (nu, nv) = (u + du, v + dv);
                    if (du == 0 && dv == 0) || nu < 0 || nv < 0 || nu >= w || nv >= h {
                        continue;
                    }
                    let y = map.data[(nv * w + nu) as usize];
                    let earlier = (nv, nu) < (v, u);
                    if y > x || (earlier && y == x) {
                        keep = false;
                        break 'scan;
                    }
                }
            }
            if keep {
                out.push((u as u32, v as u32));
            }
        }
    }
    out
}

/// Top-`k` valid-depth local maxima of the heatmap, ties in row-major order.
pub fn centers_from_heatmap(map: &Heatmap, scene: &SceneCloud, k: usize, window: u32) -> Result<Vec<RegionFrame>, GuidanceError> {
    if map.width != scene.width() || map.height != scene.height() {
        return Err(GuidanceError::HeatmapDimMismatch {
            got_w: map.width,
            got_h: map.height,
            want_w: scene.width(),
            want_h: scene.height(),
        });
    }
    let mut cands: Vec<(f64, u32, u32, usize)> = local_maxima(map, window)
        .into_iter()
        .filter_map(|(u, v)| scene.point_at(u, v).map(|i| (map.get(u, v), v, u, i)))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    Ok(cands.into_iter().take(k).map(|(_, _, _, i)| frame_at(scene, i)).collect())
}

/// Top-`k` scored points, ties in input order.
pub fn centers_from_graspness(points: &[GraspnessPoint], scene: &SceneCloud, k: usize) -> Vec<RegionFrame> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| points[i].p[2] > 0.0).collect();
    order.sort_by(|&a, &b| points[b].score.total_cmp(&points[a].score).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| {
            let c = Vec3::from(points[i].p);
            RegionFrame {
                center: c,
                source_pixel: scene.intrinsics.project_pixel(&c),
            }
        })
        .collect()
}

/// Furthest-point-spread centers over the whole scene, seeded at the point
/// nearest the cloud centroid. Prefixes are nested: the first `k` centers for
/// `k` are also the first centers for any larger count.
pub fn scene_fps_centers(scene: &SceneCloud, k: usize) -> Vec<RegionFrame> {
    let pts = scene.points();
    if pts.is_empty() || k == 0 {
        return Vec::new();
    }
    let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let seed = nearest_index(pts, &centroid).expect("non-empty");
    farthest_point_sample(pts, k, seed)
        .expect("non-empty")
        .into_iter()
        .map(|i| frame_at(scene, i))
        .collect()
}

/// Valid-depth point indices covered by the target, in row-major order.
pub fn target_indices(target: &Target, scene: &SceneCloud) -> Result<Vec<usize>, GuidanceError> {
    let (w, h) = (scene.width(), scene.height());
    match target {
        Target::Click { u, v } => {
            if *u >= w || *v >= h {
                return Err(GuidanceError::InvalidTarget(format!("click ({u}, {v}) outside {w}x{h} image")));
            }
            scene.point_at(*u, *v).map(|i| vec![i]).ok_or(GuidanceError::EmptyTarget)
        }
        Target::BBox { u0, v0, u1, v1 } => {
            if u0 >= u1 || v0 >= v1 || *u1 > w || *v1 > h {
                return Err(GuidanceError::InvalidTarget(format!("bbox [{u0}, {v0}, {u1}, {v1}] invalid for {w}x{h} image")));
            }
            let idx: Vec<usize> = (*v0..*v1)
                .flat_map(|v| (*u0..*u1).map(move |u| (u, v)))
                .filter_map(|(u, v)| scene.point_at(u, v))
                .collect();
            if idx.is_empty() {
                Err(GuidanceError::EmptyTarget)
            } else {
                Ok(idx)
            }
        }
        Target::Mask { width, height, data } => {
            if (*width, *height) != (w, h) {
                return Err(GuidanceError::InvalidTarget(format!("mask is {width}x{height}, scene is {w}x{h}")));
            }
            let idx: Vec<usize> = data
                .iter()
                .enumerate()
                .filter(|(_, m)| **m)
                .filter_map(|(p, _)| scene.point_at(p as u32 % w, p as u32 / w))
                .collect();
            if idx.is_empty() {
                Err(GuidanceError::EmptyTarget)
            } else {
                Ok(idx)
            }
        }
    }
}

/// Click gives exactly the clicked point; boxes and masks give `k` centers
/// spread by FPS over the target points, seeded nearest their centroid.
pub fn centers_from_target(target: &Target, scene: &SceneCloud, k: usize) -> Result<Vec<RegionFrame>, GuidanceError> {
    let idx = target_indices(target, scene)?;
    if matches!(target, Target::Click { .. }) {
        return Ok(vec![frame_at(scene, idx[0])]);
    }
    let pts: Vec<Vec3> = idx.iter().map(|&i| scene.points()[i]).collect();
    let centroid = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let seed = nearest_index(&pts, &centroid).expect("non-empty");
    Ok(farthest_point_sample(&pts, k.max(1), seed)
        .expect("non-empty")
        .into_iter()
        .map(|j| frame_at(scene, idx[j]))
        .collect())
}

/// Crops one region per center (ball query then translation to the center).
/// Centers whose ball holds fewer than [`K_MIN`] points are dropped.
pub fn build_regions(points: &[Vec3], centers: &[RegionFrame], radius: f64, n: usize) -> RegionSet {
    let built: Vec<Option<Region>> = centers
        .par_iter()
        .map(|frame| {
            let idx = ball_query(points, &frame.center, radius, n).ok()?;
            if idx.len() < K_MIN {
                return None;
            }
            let crop: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
            Some(Region {
                frame: *frame,
                points: to_local_frame(&crop, frame),
                radius,
            })
        })
        .collect();
    let mut set = RegionSet::default();
    for (i, r) in built.into_iter().enumerate() {
        match r {
            Some(r) => {
                set.regions.push(r);
                set.center_index.push(i);
            }
            None => set.dropped.push(i),
        }
    }
    if !set.dropped.is_empty() {
        log::warn!("dropped {} of {} regions with fewer than {K_MIN} points", set.dropped.len(), centers.len());
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{DepthImage, Intrinsics};

    fn flat_scene(w: u32, h: u32) -> SceneCloud {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            depth_scale: 0.001,
        };
        let mut d = DepthImage::new(w, h);
        d.data.fill(500);
        SceneCloud::from_depth(&d, &intr).unwrap()
    }

    #[test]
    fn grid_counts() {
        let s = flat_scene(48, 48);
        assert_eq!(grid_centers(&s, 12).len(), 16);
        assert_eq!(grid_centers(&s, 48).len(), 1);
        assert_eq!(grid_centers(&s, 5).len(), 100);
        assert_eq!(grid_centers(&s, 12)[0].source_pixel, Some((5, 5)));
    }

    #[test]
    fn grid_falls_back_inside_cell() {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 12.0,
            cy: 12.0,
            width: 24,
            height: 24,
            depth_scale: 0.001,
        };
        let mut d = DepthImage::new(24, 24);
        d.set(1, 2, 400);
        d.set(20, 20, 400);
        let s = SceneCloud::from_depth(&d, &intr).unwrap();
        let c = grid_centers(&s, 12);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].source_pixel, Some((1, 2)));
        assert_eq!(c[1].source_pixel, Some((20, 20)));
    }

    #[test]
    fn heatmap_top_k_and_ties() {
        let s = flat_scene(20, 20);
        let mut m = Heatmap::zeros(20, 20);
        m.set(7, 3, 1.0);
        let c = centers_from_heatmap(&m, &s, 1, 3).unwrap();
        assert_eq!(c[0].source_pixel, Some((7, 3)));
        assert_eq!(c[0].center, s.points()[s.point_at(7, 3).unwrap()]);
        m.set(2, 10, 1.0);
        let c = centers_from_heatmap(&m, &s, 1, 3).unwrap();
        assert_eq!(c[0].source_pixel, Some((7, 3)));
        m.set(2, 1, 1.0);
        m.set(3, 1, 1.0);
        let c = centers_from_heatmap(&m, &s, 5, 3).unwrap();
        let px: Vec<_> = c.iter().map(|f| f.source_pixel.unwrap()).collect();
        assert_eq!(px, vec![(2, 1), (7, 3), (2, 10)]);
        assert!(matches!(
            centers_from_heatmap(&Heatmap::zeros(3, 3), &s, 1, 3),
            Err(GuidanceError::HeatmapDimMismatch { .. })
        ));
    }

    #[test]
    fn click_and_empty_targets() {
        let mut s = flat_scene(10, 10);
        let c = centers_from_target(&Target::Click { u: 4, v: 6 }, &s, 48).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].center, s.points()[s.point_at(4, 6).unwrap()]);
        let intr = s.intrinsics;
        let mut d = DepthImage::new(10, 10);
        d.set(0, 0, 300);
        s = SceneCloud::from_depth(&d, &intr).unwrap();
        assert!(matches!(
            centers_from_target(&Target::Click { u: 4, v: 6 }, &s, 1),
            Err(GuidanceError::EmptyTarget)
        ));
    }

    #[test]
    fn bbox_spreads_over_target() {
        let s = flat_scene(30, 30);
        let t = Target::BBox {
            u0: 10,
            v0: 10,
            u1: 20,
            v1: 20,
        };
        let c = centers_from_target(&t, &s, 4).unwrap();
        assert_eq!(c.len(), 4);
        for f in &c {
            let (u, v) = f.source_pixel.unwrap();
            assert!((10..20).contains(&u) && (10..20).contains(&v));
        }
    }

    #[test]
    fn regions_respect_radius_and_cap() {
        let s = flat_scene(64, 64);
        let centers = grid_centers(&s, 16);
        let set = build_regions(s.points(), &centers, 0.02, 64);
        assert!(!set.regions.is_empty());
        for r in &set.regions {
            assert!(r.points.len() <= 64 && r.points.len() >= K_MIN);
            assert!(r.points.iter().all(|p| p.norm() <= 0.02 + 1e-12));
            assert!(r.frame.center.z > 0.0);
        }
        let far = [RegionFrame::new(Vec3::new(5.0, 5.0, 5.0))];
        let set = build_regions(s.points(), &far, 0.08, 64);
        assert!(set.regions.is_empty());
        assert_eq!(set.dropped, vec![0]);
    }

    #[test]
    fn scene_fps_prefixes_are_nested() {
        let s = flat_scene(40, 30);
        let a = scene_fps_centers(&s, 12);
        let b = scene_fps_centers(&s, 48);
        assert_eq!(&b[..12], &a[..]);
    }
}
