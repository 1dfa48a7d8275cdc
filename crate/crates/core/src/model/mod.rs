//! The local grasp model: encoder, heads, targets, loss, gradients and
//! training.

pub mod anchors;
pub mod checkpoint;
mod config;
pub mod loss;
pub mod network;
pub mod params;
pub mod train;

use rayon::prelude::*;
use thiserror::Error;

pub use anchors::{fit_anchors_1d, refit_anchors, shift_anchors, AnchorSet};
pub use config::{LossWeights, ModelConfig, TrainSettings};
pub use loss::{assign_targets, loss, loss_and_grad, LossBreakdown, ScoredLabel, TrainTargets};
pub use network::{Network, PredictionGrad, RegionPlan, RegionPrediction};
pub use params::{Layout, ModelParams};
pub use train::{train, EpochStats, TrainExample, TrainHistory, TrainRun};

use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("region has no points")]
    EmptyRegion,
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("expected a feature of length {expected}, got {got}")]
    FeatureSize { expected: usize, got: usize },
    #[error("loss became non-finite")]
    NonFiniteLoss,
    #[error("label angles are degenerate; cannot fit anchors")]
    DegenerateLabels,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean batch loss, its gradient and the per-sample predictions.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub grad: Vec<f64>,
    pub loss: LossBreakdown,
    pub predictions: Vec<RegionPrediction>,
}

/// Exact gradient of the mean loss over `batch`.
///
/// Samples are evaluated in parallel and reduced in batch order, so the result
/// does not depend on the worker count.
pub fn gradient(
    net: &Network,
    params: &ModelParams,
    batch: &[(&RegionPlan, &TrainTargets)],
) -> Result<BatchGradient, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if params.len() != net.layout.len() {
        return Err(ModelError::ParamCount {
            expected: net.layout.len(),
            got: params.len(),
        });
    }
    let cfg = &net.config;
    let parts: Vec<(Vec<f64>, LossBreakdown, RegionPrediction)> = batch
        .par_iter()
        .map(|(plan, targets)| {
            let mut g = vec![0.0; params.len()];
            let (pred, l) = net.forward_backward(plan, params, &mut g, |p| loss_and_grad(p, targets, cfg));
            (g, l, pred)
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = LossBreakdown::default();
    let mut predictions = Vec::with_capacity(batch.len());
    for (g, l, pred) in parts {
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v * scale;
        }
        total.add_scaled(&l, scale);
        predictions.push(pred);
    }
    if !total.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteLoss);
    }
    Ok(BatchGradient {
        grad,
        loss: total,
        predictions,
    })
}

/// Mean batch loss without gradients.
pub fn batch_loss(
    net: &Network,
    params: &ModelParams,
    batch: &[(&RegionPlan, &TrainTargets)],
) -> Result<LossBreakdown, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut total = LossBreakdown::default();
    for (plan, targets) in batch {
        let pred = net.predict_plan(plan, params)?;
        total.add_scaled(&loss(&pred, targets, &net.config), 1.0 / batch.len() as f64);
    }
    Ok(total)
}

/// Trained network weights together with their anchors.
#[derive(Debug, Clone)]
pub struct LocalGraspModel {
    pub network: Network,
    pub params: ModelParams,
    pub anchors: AnchorSet,
}

impl LocalGraspModel {
    /// Randomly initialised model with uniform anchors.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Ok(LocalGraspModel {
            network: Network::new(config)?,
            params: ModelParams::init(config, seed),
            anchors: AnchorSet::uniform(config.n_anchor),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    /// Raw head outputs for a region given in its local frame.
    pub fn predict(&self, points: &[Vec3]) -> Result<RegionPrediction, ModelError> {
        self.network.predict(points, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RegionalGrasp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_points: 16,
            embed_dim: 8,
            group_size: 4,
            stage_downsample: 4,
            head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn random_region(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.06..0.06),
                    rng.random_range(-0.06..0.06),
                    rng.random_range(-0.03..0.03),
                )
            })
            .collect()
    }

    fn random_labels(rng: &mut ChaCha8Rng, count: usize) -> Vec<ScoredLabel> {
        (0..count)
            .map(|_| ScoredLabel {
                grasp: RegionalGrasp {
                    dt: Vec3::new(
                        rng.random_range(-0.012..0.012),
                        rng.random_range(-0.012..0.012),
                        rng.random_range(-0.012..0.012),
                    ),
                    theta: rng.random_range(-1.5..1.5),
                    gamma: rng.random_range(-1.2..1.2),
                    beta: rng.random_range(-1.2..1.2),
                    width: rng.random_range(0.02..0.09),
                },
                score: rng.random_range(0.1..1.0),
            })
            .collect()
    }

    /// Perturbs each weight by a random amount so no unit sits on a ReLU kink
    /// and biases are non-trivial.
    fn random_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
        let mut p = ModelParams::init(cfg, rng.random());
        for v in &mut p.values {
            *v += rng.random_range(-0.1..0.1);
        }
        p
    }

    fn batch_of(cfg: &ModelConfig, rng: &mut ChaCha8Rng, anchors: &AnchorSet) -> Vec<(RegionPlan, TrainTargets)> {
        (0..3)
            .map(|i| {
                let pts = random_region(rng, 16);
                let labels = if i == 2 { Vec::new() } else { random_labels(rng, 1 + i) };
                (
                    RegionPlan::new(&pts, cfg).unwrap(),
                    assign_targets(&labels, anchors, cfg),
                )
            })
            .collect()
    }

    /// Central difference of the mean batch loss along parameter `i`.
    fn central(net: &Network, params: &ModelParams, batch: &[(&RegionPlan, &TrainTargets)], i: usize, h: f64) -> f64 {
        let mut plus = params.clone();
        plus.values[i] += h;
        let mut minus = params.clone();
        minus.values[i] -= h;
        let lp = batch_loss(net, &plus, batch).unwrap().total;
        let lm = batch_loss(net, &minus, batch).unwrap().total;
        (lp - lm) / (2.0 * h)
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let anchors = AnchorSet::uniform(cfg.n_anchor);
        for draw in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + draw);
            let params = random_params(&cfg, &mut rng);
            let owned = batch_of(&cfg, &mut rng, &anchors);
            let batch: Vec<(&RegionPlan, &TrainTargets)> = owned.iter().map(|(p, t)| (p, t)).collect();
            let analytic = gradient(&net, &params, &batch).unwrap().grad;
            for (i, &a) in analytic.iter().enumerate() {
                let numeric = central(&net, &params, &batch, i, 1e-5);
                if rel_err(a, numeric) < 1e-4 {
                    continue;
                }
                // a ReLU or max-pool switch inside the stencil; the loss is
                // piecewise smooth, so a narrower stencil must agree
                let fine = central(&net, &params, &batch, i, 1e-8);
                assert!(
                    rel_err(a, fine) < 1e-4,
                    "draw {draw} param {i}: analytic {a} numeric {numeric} fine {fine}"
                );
            }
        }
    }

    #[test]
    fn zero_loss_weights_give_zero_gradient() {
        let mut cfg = tiny_config();
        cfg.loss_weights = LossWeights {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
        };
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_params(&cfg, &mut rng);
        let owned = batch_of(&cfg, &mut rng, &AnchorSet::uniform(cfg.n_anchor));
        let batch: Vec<(&RegionPlan, &TrainTargets)> = owned.iter().map(|(p, t)| (p, t)).collect();
        let g = gradient(&net, &params, &batch).unwrap();
        assert!(g.grad.iter().all(|v| *v == 0.0));
        assert_eq!(g.loss.total, 0.0);
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = random_params(&cfg, &mut rng);
        let owned = batch_of(&cfg, &mut rng, &AnchorSet::uniform(cfg.n_anchor));
        let single: Vec<(&RegionPlan, &TrainTargets)> = owned.iter().map(|(p, t)| (p, t)).collect();
        let doubled: Vec<(&RegionPlan, &TrainTargets)> = single.iter().chain(single.iter()).copied().collect();
        let a = gradient(&net, &params, &single).unwrap();
        let b = gradient(&net, &params, &doubled).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
        assert!((a.loss.total - b.loss.total).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let cfg = tiny_config();
        let net = Network::new(&cfg).unwrap();
        let params = ModelParams::init(&cfg, 0);
        assert!(matches!(gradient(&net, &params, &[]), Err(ModelError::EmptyBatch)));
    }
}
