//! End-to-end detection: guidance, region crops, the local model, decoding
//! and grasp NMS.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

use crate::cloud::{farthest_point_sample, SceneCloud};
use crate::geometry::{Grasp, RegionFrame, Vec3};
use crate::guidance::{
    build_regions, centers_from_graspness, centers_from_heatmap, centers_from_target, grid_centers, GraspnessPoint,
    GuidanceError, Heatmap, Target, DEFAULT_GRID_PX, DEFAULT_K, DEFAULT_RADIUS,
};
use crate::model::{LocalGraspModel, ModelError};
use crate::postproc::{decode_region, grasp_nms, splice_heatmap, DecodedGrasp, PostprocError, Splice, NMS_ROTATION, NMS_TRANSLATION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error("guidance produced no usable region")]
    NoRegions,
    #[error("unknown mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Grid,
    Heatmap,
    Graspness,
    Bbox,
    Mask,
    Click,
}

impl FromStr for Mode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "grid" => Mode::Grid,
            "heatmap" => Mode::Heatmap,
            "graspness" => Mode::Graspness,
            "bbox" => Mode::Bbox,
            "mask" => Mode::Mask,
            "click" => Mode::Click,
            _ => return Err(PipelineError::UnknownMode(s.to_string())),
        })
    }
}

/// Where region centers come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Guidance {
    Grid,
    Heatmap(Heatmap),
    Graspness(Vec<GraspnessPoint>),
    Target(Target),
}

impl Guidance {
    pub fn mode(&self) -> Mode {
        match self {
            Guidance::Grid => Mode::Grid,
            Guidance::Heatmap(_) => Mode::Heatmap,
            Guidance::Graspness(_) => Mode::Graspness,
            Guidance::Target(Target::Click { .. }) => Mode::Click,
            Guidance::Target(Target::BBox { .. }) => Mode::Bbox,
            Guidance::Target(Target::Mask { .. }) => Mode::Mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub k: usize,
    pub grid_px: u32,
    pub radius: f64,
    pub local_max_window: u32,
    pub top_k_per_region: usize,
    pub nms_translation: f64,
    pub nms_rotation: f64,
    /// Detections returned after NMS.
    pub max_output: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            k: DEFAULT_K,
            grid_px: DEFAULT_GRID_PX,
            radius: DEFAULT_RADIUS,
            local_max_window: 3,
            top_k_per_region: 49,
            nms_translation: NMS_TRANSLATION,
            nms_rotation: NMS_ROTATION,
            max_output: 50,
        }
    }
}

/// One line of the grasp output file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspOutput {
    #[serde(flatten)]
    pub grasp: Grasp,
    pub region_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// NMS survivors, best first; `region_index` points into `regions`.
    pub grasps: Vec<DecodedGrasp>,
    /// Frame and best decoded score of every region that was run.
    pub regions: Vec<(RegionFrame, f64)>,
    /// Guidance centers dropped for having too few points.
    pub dropped: usize,
}

impl Detection {
    pub fn grasp_list(&self) -> Vec<Grasp> {
        self.grasps.iter().map(|d| d.grasp).collect()
    }

    pub fn outputs(&self) -> Vec<GraspOutput> {
        self.grasps
            .iter()
            .map(|d| GraspOutput {
                grasp: d.grasp,
                region_index: d.region_index,
            })
            .collect()
    }

    pub fn splice(&self, width: u32, height: u32, radius_px: u32) -> Result<Splice, PostprocError> {
        splice_heatmap(&self.regions, width, height, radius_px)
    }
}

/// Region centers for `guidance`. Grid candidates beyond `k` are thinned by
/// furthest point sampling, seeded at the first cell.
pub fn guidance_centers(scene: &SceneCloud, guidance: &Guidance, cfg: &DetectConfig) -> Result<Vec<RegionFrame>, PipelineError> {
    Ok(match guidance {
        Guidance::Grid => {
            let all = grid_centers(scene, cfg.grid_px);
            if all.len() <= cfg.k {
                all
            } else {
                let pts: Vec<Vec3> = all.iter().map(|f| f.center).collect();
                farthest_point_sample(&pts, cfg.k, 0)
                    .expect("non-empty")
                    .into_iter()
                    .map(|i| all[i])
                    .collect()
            }
        }
        Guidance::Heatmap(map) => centers_from_heatmap(map, scene, cfg.k, cfg.local_max_window)?,
        Guidance::Graspness(points) => centers_from_graspness(points, scene, cfg.k),
        Guidance::Target(t) => centers_from_target(t, scene, cfg.k)?,
    })
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub model: LocalGraspModel,
    pub config: DetectConfig,
}

impl Detector {
    pub fn new(model: LocalGraspModel, config: DetectConfig) -> Self {
        Detector { model, config }
    }

    /// Runs the model on regions around `centers`.
    pub fn detect_at(&self, scene: &SceneCloud, centers: &[RegionFrame]) -> Result<Detection, PipelineError> {
        self.detect_at_with(scene, centers, &self.config)
    }

    pub fn detect(&self, scene: &SceneCloud, guidance: &Guidance) -> Result<Detection, PipelineError> {
        self.detect_with(scene, guidance, &self.config)
    }

    /// Like [`Detector::detect`] with per-call settings.
    pub fn detect_with(&self, scene: &SceneCloud, guidance: &Guidance, cfg: &DetectConfig) -> Result<Detection, PipelineError> {
        let centers = guidance_centers(scene, guidance, cfg)?;
        self.detect_at_with(scene, &centers, cfg)
    }

    pub fn detect_at_with(&self, scene: &SceneCloud, centers: &[RegionFrame], cfg: &DetectConfig) -> Result<Detection, PipelineError> {
        let mcfg = self.model.config();
        let set = build_regions(scene.points(), centers, cfg.radius, mcfg.n_points);
        if set.regions.is_empty() {
            return Err(PipelineError::NoRegions);
        }
        let decoded: Vec<Vec<DecodedGrasp>> = set
            .regions
            .par_iter()
            .enumerate()
            .map(|(ri, r)| {
                let pred = self.model.predict(&r.points)?;
                Ok(decode_region(&pred, &r.frame, ri, &self.model.anchors, mcfg, cfg.top_k_per_region))
            })
            .collect::<Result<_, ModelError>>()?;
        let regions = set
            .regions
            .iter()
            .zip(&decoded)
            .map(|(r, d)| (r.frame, d.first().map_or(0.0, |g| g.grasp.score)))
            .collect();
        let all: Vec<DecodedGrasp> = decoded.into_iter().flatten().collect();
        let mut grasps = grasp_nms(&all, cfg.nms_translation, cfg.nms_rotation);
        grasps.truncate(cfg.max_output);
        Ok(Detection {
            grasps,
            regions,
            dropped: set.dropped.len(),
        })
    }
}
