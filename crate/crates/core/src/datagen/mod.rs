//! Regional training data: label heatmaps, label-guided center sampling,
//! region crops with their nearby labels, and the synthetic scenes they are
//! generated from.

pub mod record;
pub mod synth;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use record::{decode_dataset, decode_record, encode_dataset, encode_record};
pub use synth::{default_intrinsics, synthesize_scene, synthesize_with_objects, SynthConfig};

use crate::cloud::{ball_query, CloudError, Intrinsics};
use crate::geometry::{to_local_frame, RegionFrame, RegionalGrasp, Vec3, LABEL_RADIUS};
use crate::guidance::{Heatmap, K_MIN};
use crate::model::{ScoredLabel, TrainExample};
use crate::scene::{Scene, SceneError, SceneLabel, SceneLabels};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("placed only {placed} of {requested} objects")]
    PlacementFailure { placed: usize, requested: usize },
    #[error("invalid datagen config: {0}")]
    InvalidConfig(String),
    #[error("region has fewer than {K_MIN} points")]
    EmptyRegion,
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SplitMix64 finaliser over a pair, used to derive per-item seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pixels of the label centers; labels behind the camera or outside the
/// image are dropped.
pub fn project_to_planar(labels: &[SceneLabel], intr: &Intrinsics) -> Vec<(u32, u32)> {
    labels.iter().filter_map(|l| intr.project_pixel(&l.grasp.t)).collect()
}

/// Per-pixel max of `exp(-d^2 / (2 sigma^2))` over all label pixels, truncated
/// at 5 sigma.
pub fn render_label_kernels(pixels: &[(u32, u32)], width: u32, height: u32, sigma: f64) -> Heatmap {
    let mut map = Heatmap::zeros(width, height);
    let reach = (5.0 * sigma).ceil() as i64;
    for &(pu, pv) in pixels {
        let (pu, pv) = (pu as i64, pv as i64);
        for v in (pv - reach).max(0)..=(pv + reach).min(height as i64 - 1) {
            for u in (pu - reach).max(0)..=(pu + reach).min(width as i64 - 1) {
                let d2 = ((u - pu).pow(2) + (v - pv).pow(2)) as f64;
                let k = (-d2 / (2.0 * sigma * sigma)).exp();
                let i = v as usize * width as usize + u as usize;
                if k > map.data[i] {
                    map.data[i] = k;
                }
            }
        }
    }
    map
}

/// Separable Gaussian blur, zero outside the image.
pub fn gaussian_blur(map: &Heatmap, sigma: f64) -> Heatmap {
    let reach = (4.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-reach..=reach).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (map.width as i64, map.height as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let d = j as i64 - reach;
                    let (su, sv) = if horizontal { (u + d, v) } else { (u, v + d) };
                    if su >= 0 && su < w && sv >= 0 && sv < h {
                        acc += k * src[(sv * w + su) as usize];
                    }
                }
                out[(v * w + u) as usize] = acc;
            }
        }
        out
    };
    let data = pass(&pass(&map.data, true), false);
    Heatmap {
        width: map.width,
        height: map.height,
        data,
    }
}

/// Label heatmap: kernels, blur, then the maximum rescaled to 1.
pub fn render_label_heatmap(pixels: &[(u32, u32)], width: u32, height: u32, sigma_k: f64, sigma_blur: f64) -> Heatmap {
    assert!(sigma_k > 0.0 && sigma_blur > 0.0, "sigmas must be positive");
    let mut map = gaussian_blur(&render_label_kernels(pixels, width, height, sigma_k), sigma_blur);
    let max = map.max();
    if max > 0.0 {
        map.data.iter_mut().for_each(|x| *x = (*x / max).clamp(0.0, 1.0));
    }
    map
}

/// Grid sampling of the label heatmap. Every `cell_px` cell emits its arg-max
/// pixel (first in row-major order) when it reaches `threshold`. Then
/// `round(noise_frac * emitted)` cells, chosen at random among all cells, each
/// emit one random pixel accepted by `valid`.
pub fn sample_label_centers(
    heatmap: &Heatmap,
    cell_px: u32,
    threshold: f64,
    noise_frac: f64,
    seed: u64,
    valid: impl Fn(u32, u32) -> bool,
) -> Vec<(u32, u32)> {
    assert!(cell_px >= 1, "cell_px must be positive");
    let (w, h) = (heatmap.width, heatmap.height);
    let cells: Vec<(u32, u32)> = (0..h.div_ceil(cell_px))
        .flat_map(|cy| (0..w.div_ceil(cell_px)).map(move |cx| (cx * cell_px, cy * cell_px)))
        .collect();
    let mut out = Vec::new();
    for &(u0, v0) in &cells {
        let mut best: Option<(u32, u32, f64)> = None;
        for v in v0..(v0 + cell_px).min(h) {
            for u in u0..(u0 + cell_px).min(w) {
                let x = heatmap.get(u, v);
                if best.is_none_or(|b| x > b.2) {
                    best = Some((u, v, x));
                }
            }
        }
        if let Some((u, v, x)) = best {
            if x >= threshold && valid(u, v) {
                out.push((u, v));
            }
        }
    }
    let extra = (noise_frac * out.len() as f64).round() as usize;
    if extra > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = sample_indices(&mut rng, cells.len(), extra.min(cells.len())).into_vec();
        chosen.sort_unstable();
        for ci in chosen {
            let (u0, v0) = cells[ci];
            let candidates: Vec<(u32, u32)> = (v0..(v0 + cell_px).min(h))
                .flat_map(|v| (u0..(u0 + cell_px).min(w)).map(move |u| (u, v)))
                .filter(|&(u, v)| valid(u, v))
                .collect();
            if !candidates.is_empty() {
                out.push(candidates[rng.random_range(0..candidates.len())]);
            }
        }
    }
    out
}

/// A stored label, relative to its region center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleLabel {
    pub dt: [f32; 3],
    pub theta: f32,
    pub gamma: f32,
    pub beta: f32,
    pub width: f32,
    pub score: f32,
}

impl SampleLabel {
    pub fn to_array(&self) -> [f32; 8] {
        let [x, y, z] = self.dt;
        [x, y, z, self.theta, self.gamma, self.beta, self.width, self.score]
    }

    pub fn from_array(a: [f32; 8]) -> Self {
        SampleLabel {
            dt: [a[0], a[1], a[2]],
            theta: a[3],
            gamma: a[4],
            beta: a[5],
            width: a[6],
            score: a[7],
        }
    }

    pub fn dt(&self) -> Vec3 {
        Vec3::new(self.dt[0] as f64, self.dt[1] as f64, self.dt[2] as f64)
    }

    pub fn to_scored(&self) -> ScoredLabel {
        ScoredLabel {
            grasp: RegionalGrasp {
                dt: self.dt(),
                theta: self.theta as f64,
                gamma: self.gamma as f64,
                beta: self.beta as f64,
                width: self.width as f64,
            },
            score: self.score as f64,
        }
    }
}

/// A cropped region in its local frame with the labels near its center.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSample {
    pub frame: RegionFrame,
    pub points: Vec<[f32; 3]>,
    pub labels: Vec<SampleLabel>,
}

impl RegionSample {
    pub fn local_points(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
    }

    pub fn to_example(&self) -> TrainExample {
        TrainExample {
            points: self.local_points(),
            labels: self.labels.iter().map(SampleLabel::to_scored).collect(),
        }
    }
}

/// Crops the region around `frame` and keeps the labels whose center lies
/// within 2 cm of it. The distance is checked on the stored single-precision
/// offset, so every stored label satisfies the bound exactly.
pub fn make_region_sample(
    points: &[Vec3],
    labels: &[SceneLabel],
    frame: &RegionFrame,
    radius: f64,
    n: usize,
) -> Result<RegionSample, DatagenError> {
    if !(0.06..=0.12).contains(&radius) {
        return Err(DatagenError::InvalidConfig(format!("region radius {radius} outside [0.06, 0.12]")));
    }
    let idx = match ball_query(points, &frame.center, radius, n) {
        Ok(idx) if idx.len() >= K_MIN => idx,
        Ok(_) | Err(CloudError::NoNeighbors) => return Err(DatagenError::EmptyRegion),
        Err(e) => return Err(e.into()),
    };
    let crop: Vec<Vec3> = idx.iter().map(|&i| points[i]).collect();
    let local = to_local_frame(&crop, frame);
    let kept = labels
        .iter()
        .filter_map(|l| {
            let dt = l.grasp.t - frame.center;
            let dt32 = [dt.x as f32, dt.y as f32, dt.z as f32];
            let stored = Vec3::new(dt32[0] as f64, dt32[1] as f64, dt32[2] as f64);
            (stored.norm() <= LABEL_RADIUS).then(|| SampleLabel {
                dt: dt32,
                theta: l.grasp.theta as f32,
                gamma: l.grasp.gamma as f32,
                beta: l.grasp.beta as f32,
                width: l.grasp.width as f32,
                score: l.grasp.score as f32,
            })
        })
        .collect();
    Ok(RegionSample {
        frame: RegionFrame::new(frame.center),
        points: local.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        labels: kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub sigma_k: f64,
    pub sigma_blur: f64,
    pub threshold: f64,
    pub noise_frac: f64,
    pub cell_px: u32,
    /// Labels below this score do not seed the heatmap.
    pub min_label_score: f64,
    /// Region radii are drawn uniformly from this range.
    pub radius_range: (f64, f64),
    pub n_points: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            sigma_k: 3.0,
            sigma_blur: 2.0,
            threshold: 0.2,
            noise_frac: 0.1,
            cell_px: 8,
            min_label_score: 0.5,
            radius_range: (0.06, 0.12),
            n_points: 512,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        if !(self.sigma_k > 0.0 && self.sigma_blur > 0.0) {
            return bad("sigmas must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.noise_frac) {
            return bad("noise_frac must lie in [0, 1)");
        }
        let (lo, hi) = self.radius_range;
        if !(0.06 <= lo && lo <= hi && hi <= 0.12) {
            return bad("radius_range must lie within [0.06, 0.12]");
        }
        if self.cell_px == 0 || self.n_points < K_MIN {
            return bad("cell_px must be positive and n_points at least K_MIN");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub regions: usize,
    pub labeled_regions: usize,
    pub labels: usize,
    /// Fraction of regions without any label.
    pub invalid_fraction: f64,
    /// Centers whose region had too few points.
    pub dropped: usize,
}

impl DatasetStats {
    fn finish(mut self) -> Self {
        self.invalid_fraction = if self.regions == 0 {
            0.0
        } else {
            (self.regions - self.labeled_regions) as f64 / self.regions as f64
        };
        self
    }
}

/// Region samples of one scene. Deterministic per `seed`.
pub fn scene_samples(scene: &Scene, labels: &SceneLabels, cfg: &DatagenConfig, seed: u64) -> Result<(Vec<RegionSample>, usize), DatagenError> {
    cfg.validate()?;
    let cloud = scene.cloud()?;
    let strong: Vec<SceneLabel> = labels.grasps.iter().filter(|l| l.grasp.score >= cfg.min_label_score).copied().collect();
    let pixels = project_to_planar(&strong, &scene.intrinsics);
    let heat = render_label_heatmap(&pixels, cloud.width(), cloud.height(), cfg.sigma_k, cfg.sigma_blur);
    let centers = sample_label_centers(&heat, cfg.cell_px, cfg.threshold, cfg.noise_frac, mix_seed(seed, 1), |u, v| {
        cloud.point_at(u, v).is_some()
    });
    let mut out = Vec::with_capacity(centers.len());
    let mut dropped = 0;
    for (ci, &(u, v)) in centers.iter().enumerate() {
        let p = cloud.points()[cloud.point_at(u, v).expect("valid center")];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2 + ci as u64));
        let (lo, hi) = cfg.radius_range;
        let radius = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        match make_region_sample(cloud.points(), &labels.grasps, &RegionFrame::with_pixel(p, (u, v)), radius, cfg.n_points) {
            Ok(s) => out.push(s),
            Err(DatagenError::EmptyRegion) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, dropped))
}

/// Region dataset over many scenes; scenes run in parallel, results are
/// concatenated in scene order.
pub fn generate_dataset(
    scenes: &[(Scene, SceneLabels)],
    cfg: &DatagenConfig,
    seed: u64,
) -> Result<(Vec<RegionSample>, DatasetStats), DatagenError> {
    let per_scene: Vec<Result<(Vec<RegionSample>, usize), DatagenError>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, (scene, labels))| scene_samples(scene, labels, cfg, mix_seed(seed, i as u64)))
        .collect();
    let mut samples = Vec::new();
    let mut stats = DatasetStats {
        scenes: scenes.len(),
        ..Default::default()
    };
    for r in per_scene {
        let (s, dropped) = r?;
        stats.dropped += dropped;
        stats.regions += s.len();
        stats.labeled_regions += s.iter().filter(|x| !x.labels.is_empty()).count();
        stats.labels += s.iter().map(|x| x.labels.len()).sum::<usize>();
        samples.extend(s);
    }
    Ok((samples, stats.finish()))
}

/// `count` synthetic scenes with 3 to 8 objects each. Scene `i` depends only on
/// `(seed, i)`.
pub fn synthesize_corpus(count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(Scene, SceneLabels)>, DatagenError> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let s = mix_seed(seed, i as u64);
            let objects = 3 + (s % 6) as usize;
            synthesize_scene(s, objects, cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grasp;

    fn label_at(t: Vec3) -> SceneLabel {
        SceneLabel {
            grasp: Grasp {
                t,
                theta: 0.1,
                gamma: -0.2,
                beta: 0.3,
                width: 0.05,
                score: 0.9,
            },
            object_id: 0,
            mu_min: 0.2,
            contacts: None,
        }
    }

    #[test]
    fn planar_projection() {
        let intr = Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 101,
            height: 101,
            depth_scale: 0.001,
        };
        let labels = [
            label_at(Vec3::new(0.0, 0.0, 1.0)),
            label_at(Vec3::new(0.1, 0.0, 1.0)),
            label_at(Vec3::new(0.0, 0.0, -1.0)),
            label_at(Vec3::new(5.0, 0.0, 1.0)),
        ];
        assert_eq!(project_to_planar(&labels, &intr), vec![(50, 50), (60, 50)]);
    }

    #[test]
    fn kernel_value_at_one_sigma() {
        let m = render_label_kernels(&[(20, 20)], 41, 41, 3.0);
        assert_eq!(m.get(20, 20), 1.0);
        assert!((m.get(23, 20) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m.get(20, 17) - 0.6065306597126334).abs() < 1e-15);
    }

    #[test]
    fn heatmap_peak_and_empty() {
        let m = render_label_heatmap(&[(20, 15)], 40, 30, 3.0, 2.0);
        assert_eq!(m.get(20, 15), 1.0);
        assert!(m.data.iter().all(|x| (0.0..=1.0).contains(x)));
        let z = render_label_heatmap(&[], 40, 30, 3.0, 2.0);
        assert!(z.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn heatmap_is_translation_equivariant() {
        let px = [(30, 30), (36, 33), (41, 28)];
        let (du, dv) = (7u32, 4u32);
        let shifted: Vec<_> = px.iter().map(|&(u, v)| (u + du, v + dv)).collect();
        let a = render_label_heatmap(&px, 100, 80, 3.0, 2.0);
        let b = render_label_heatmap(&shifted, 100, 80, 3.0, 2.0);
        for v in 10..60 {
            for u in 10..70 {
                assert!((a.get(u, v) - b.get(u + du, v + dv)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_sampling() {
        let mut one = Heatmap::zeros(40, 40);
        one.set(13, 27, 1.0);
        assert_eq!(sample_label_centers(&one, 8, 0.5, 0.0, 0, |_, _| true), vec![(13, 27)]);
        let zero = Heatmap::zeros(40, 40);
        assert!(sample_label_centers(&zero, 8, 0.5, 0.0, 0, |_, _| true).is_empty());
        let mut big = Heatmap::zeros(80, 80);
        big.data.fill(1.0);
        let a = sample_label_centers(&big, 8, 0.5, 0.1, 42, |_, _| true);
        assert_eq!(a.len(), 110);
        assert_eq!(a, sample_label_centers(&big, 8, 0.5, 0.1, 42, |_, _| true));
        assert_ne!(a, sample_label_centers(&big, 8, 0.5, 0.1, 43, |_, _| true));
        let half = sample_label_centers(&big, 8, 0.5, 0.1, 42, |u, _| u >= 40);
        assert!((50..=55).contains(&half.len()) && half.iter().all(|&(u, _)| u >= 40));
        assert!(sample_label_centers(&zero, 8, 0.5, 0.1, 42, |_, _| true).is_empty());
    }

    #[test]
    fn region_label_radius() {
        let pts: Vec<Vec3> = (0..400)
            .map(|i| Vec3::new((i % 20) as f64 * 0.004, (i / 20) as f64 * 0.004, 0.5))
            .collect();
        let c = Vec3::new(0.04, 0.04, 0.5);
        let labels = [
            label_at(c + Vec3::new(0.015, 0.0, 0.0)),
            label_at(c + Vec3::new(0.0, 0.025, 0.0)),
            label_at(c),
        ];
        let s = make_region_sample(&pts, &labels, &RegionFrame::new(c), 0.08, 128).unwrap();
        assert_eq!(s.points.len(), 128);
        assert_eq!(s.labels.len(), 2);
        assert!((s.labels[0].dt().norm() - 0.015).abs() < 1e-7);
        assert_eq!(s.labels[1].dt, [0.0; 3]);
        assert!(s.local_points().iter().all(|p| p.norm() <= 0.08 + 1e-6));
        let far = RegionFrame::new(Vec3::new(5.0, 5.0, 5.0));
        assert!(matches!(make_region_sample(&pts, &labels, &far, 0.08, 128), Err(DatagenError::EmptyRegion)));
        assert!(make_region_sample(&pts, &labels, &RegionFrame::new(c), 0.2, 128).is_err());
    }

    #[test]
    fn dataset_is_deterministic_and_labels_are_local() {
        let scenes = synthesize_corpus(3, 5, &SynthConfig::default()).unwrap();
        let cfg = DatagenConfig::default();
        let (a, stats) = generate_dataset(&scenes, &cfg, 9).unwrap();
        let (b, _) = generate_dataset(&scenes, &cfg, 9).unwrap();
        assert_eq!(encode_dataset(&a).unwrap(), encode_dataset(&b).unwrap());
        assert!(stats.labeled_regions > 0 && stats.labels > 0);
        assert_eq!(stats.regions, a.len());
        for s in &a {
            assert!(s.labels.iter().all(|l| l.dt().norm() <= LABEL_RADIUS));
        }
    }
}
