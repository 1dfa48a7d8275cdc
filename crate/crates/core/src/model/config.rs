use serde::{Deserialize, Serialize};

use super::ModelError;

/// Weights of the composite loss
/// `a * (theta_cls + theta_reg) + b * width + c * offset + d * anchor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            a: 1.0,
            b: 10.0,
            c: 5.0,
            d: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Refit anchors to the label angles after every epoch.
    pub refresh_anchors: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            refresh_anchors: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Maximum number of points per region fed to the encoder.
    pub n_points: usize,
    pub k_theta: usize,
    /// Anchors per spatial angle; the head scores `n_anchor^2` combinations.
    pub n_anchor: usize,
    pub embed_dim: usize,
    pub stage_count: usize,
    pub group_size: usize,
    /// Each encoder stage keeps `ceil(m / stage_downsample)` group centers.
    pub stage_downsample: usize,
    /// Grouping radius of the first stage in meters; doubles per stage.
    pub group_radius: f64,
    /// Multiplier applied to region-frame coordinates before embedding.
    pub coord_scale: f64,
    pub head_hidden: usize,
    pub max_width: f64,
    pub loss_weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Train unlabeled regions towards all-negative anchor scores.
    pub supervise_empty_regions: bool,
    /// Minimum spacing between neighbouring anchors, radians.
    pub min_anchor_separation: f64,
    pub train: TrainSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_points: 512,
            k_theta: 6,
            n_anchor: 7,
            embed_dim: 64,
            stage_count: 2,
            group_size: 32,
            stage_downsample: 8,
            group_radius: 0.02,
            coord_scale: 10.0,
            head_hidden: 64,
            max_width: crate::geometry::DEFAULT_MAX_WIDTH,
            loss_weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            supervise_empty_regions: true,
            min_anchor_separation: 2f64.to_radians(),
            train: TrainSettings::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced network used for desk-scale training runs.
    pub fn small() -> Self {
        ModelConfig {
            n_points: 256,
            embed_dim: 32,
            group_size: 16,
            head_hidden: 64,
            ..ModelConfig::default()
        }
    }

    /// Number of anchor combinations scored per region.
    pub fn n_combos(&self) -> usize {
        self.n_anchor * self.n_anchor
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.k_theta < 2 {
            return bad("k_theta must be >= 2");
        }
        if self.n_anchor < 2 {
            return bad("n_anchor must be >= 2");
        }
        if self.embed_dim == 0 || self.head_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.stage_count == 0 || self.group_size == 0 || self.stage_downsample == 0 {
            return bad("encoder stages need positive counts");
        }
        if self.n_points == 0 {
            return bad("n_points must be positive");
        }
        if !(self.group_radius > 0.0 && self.coord_scale > 0.0 && self.max_width > 0.0) {
            return bad("radii and scales must be positive");
        }
        if self.train.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}
