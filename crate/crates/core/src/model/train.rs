//! Mini-batch Adam training with cosine learning-rate decay and per-epoch
//! anchor refits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt::Write as _;

use super::{
    assign_targets, gradient, refit_anchors, shift_anchors, AnchorSet, LocalGraspModel, LossBreakdown, ModelConfig,
    ModelError, ModelParams, Network, RegionPlan, ScoredLabel, TrainTargets,
};
use crate::geometry::Vec3;

/// One training region: points in the region frame and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub points: Vec<Vec3>,
    pub labels: Vec<ScoredLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub loss: LossBreakdown,
    /// Fraction of labeled regions whose arg-max theta bin is correct.
    pub theta_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,theta_cls,theta_reg,width,offset,anchor,theta_accuracy,learning_rate\n");
        for e in &self.epochs {
            let l = &e.loss;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                l.total,
                l.theta_cls,
                l.theta_reg,
                l.width,
                l.offset,
                l.anchor,
                e.theta_accuracy,
                e.learning_rate
            )
            .unwrap();
        }
        s
    }
}

/// Result of a training run. When the loss turns non-finite, `model` holds the
/// parameters from before the failing step and `aborted` carries the error.
#[derive(Debug)]
pub struct TrainRun {
    pub model: LocalGraspModel,
    pub history: TrainHistory,
    pub aborted: Option<ModelError>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &super::TrainSettings) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

fn label_angles(examples: &[TrainExample]) -> (Vec<f64>, Vec<f64>) {
    examples
        .iter()
        .flat_map(|e| e.labels.iter().map(|l| (l.grasp.beta, l.grasp.gamma)))
        .unzip()
}

fn initial_anchors(examples: &[TrainExample], cfg: &ModelConfig) -> AnchorSet {
    let (betas, gammas) = label_angles(examples);
    match refit_anchors(&betas, &gammas, cfg.n_anchor, cfg.min_anchor_separation) {
        Ok(a) => a,
        Err(e) => {
            log::warn!("{e}; falling back to uniform anchors");
            AnchorSet::uniform(cfg.n_anchor)
        }
    }
}

fn targets_for(examples: &[TrainExample], anchors: &AnchorSet, cfg: &ModelConfig) -> Vec<TrainTargets> {
    examples.iter().map(|e| assign_targets(&e.labels, anchors, cfg)).collect()
}

/// Trains from scratch. Deterministic for a fixed seed regardless of the
/// worker count.
pub fn train(examples: &[TrainExample], config: &ModelConfig, seed: u64) -> Result<TrainRun, ModelError> {
    let init = LocalGraspModel {
        network: Network::new(config)?,
        params: ModelParams::init(config, seed),
        anchors: initial_anchors(examples, config),
    };
    train_from(init, examples, seed)
}

/// Continues training an existing model.
pub fn train_from(model: LocalGraspModel, examples: &[TrainExample], seed: u64) -> Result<TrainRun, ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let net = model.network.clone();
    let cfg = net.config.clone();
    let settings = cfg.train.clone();
    let plans: Vec<RegionPlan> = examples
        .par_iter()
        .map(|e| RegionPlan::new(&e.points, &cfg))
        .collect::<Result<_, _>>()?;
    let (betas, gammas) = label_angles(examples);
    let mut anchors = model.anchors;
    let mut targets = targets_for(examples, &anchors, &cfg);
    let mut params = model.params;
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e7);
    let batches_per_epoch = examples.len().div_ceil(settings.batch_size);
    let total_steps = settings.epochs * batches_per_epoch;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let (mut correct, mut labeled) = (0usize, 0usize);
        let mut lr = settings.learning_rate;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<(&RegionPlan, &TrainTargets)> = chunk.iter().map(|&i| (&plans[i], &targets[i])).collect();
            let bg = match gradient(&net, &params, &batch) {
                Ok(bg) => bg,
                Err(ModelError::NonFiniteLoss) => {
                    return Ok(TrainRun {
                        model: LocalGraspModel {
                            network: net,
                            params,
                            anchors,
                        },
                        history,
                        aborted: Some(ModelError::NonFiniteLoss),
                    })
                }
                Err(e) => return Err(e),
            };
            sum.add_scaled(&bg.loss, chunk.len() as f64 / examples.len() as f64);
            for (&i, pred) in chunk.iter().zip(&bg.predictions) {
                let t = &targets[i];
                if t.valid {
                    labeled += 1;
                    if argmax(&pred.theta_logits) == t.theta_bin {
                        correct += 1;
                    }
                }
            }
            lr = cosine_lr(settings.learning_rate, step, total_steps);
            adam.update(&mut params.values, &bg.grad, lr, &settings);
            step += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: sum,
            theta_accuracy: if labeled > 0 { correct as f64 / labeled as f64 } else { 0.0 },
            learning_rate: lr,
        };
        log::info!(
            "epoch {} loss {:.5} theta acc {:.3}",
            stats.epoch,
            stats.loss.total,
            stats.theta_accuracy
        );
        history.epochs.push(stats);
        if settings.refresh_anchors {
            if let Ok(next) = shift_anchors(&anchors, &betas, &gammas, cfg.min_anchor_separation) {
                if next != anchors {
                    anchors = next;
                    targets = targets_for(examples, &anchors, &cfg);
                }
            }
        }
    }
    Ok(TrainRun {
        model: LocalGraspModel {
            network: net,
            params,
            anchors,
        },
        history,
        aborted: None,
    })
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RegionalGrasp;
    use rand::Rng;

    /// Small regions whose shape encodes the label: a slab rotated by the
    /// label's theta.
    fn overfit_set(n: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let theta: f64 = rng.random_range(-1.5..1.5);
                let (c, s) = (theta.cos(), theta.sin());
                let points = (0..48)
                    .map(|_| {
                        let a: f64 = rng.random_range(-0.05..0.05);
                        let b: f64 = rng.random_range(-0.01..0.01);
                        let z: f64 = rng.random_range(-0.005..0.005);
                        Vec3::new(a * c - b * s, a * s + b * c, z)
                    })
                    .collect();
                let labels = vec![ScoredLabel {
                    grasp: RegionalGrasp {
                        dt: Vec3::new(
                            rng.random_range(-0.01..0.01),
                            rng.random_range(-0.01..0.01),
                            0.0,
                        ),
                        theta,
                        gamma: rng.random_range(-0.6..0.6),
                        beta: rng.random_range(-0.6..0.6),
                        width: 0.03,
                    },
                    score: 0.9,
                }];
                TrainExample { points, labels }
            })
            .collect()
    }

    fn overfit_config(epochs: usize) -> ModelConfig {
        let mut cfg = ModelConfig::small();
        cfg.n_points = 48;
        cfg.embed_dim = 16;
        cfg.group_size = 8;
        cfg.head_hidden = 32;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = 16;
        cfg.train.learning_rate = 3e-3;
        cfg
    }

    #[test]
    fn overfits_small_set() {
        let data = overfit_set(64, 1);
        let run = train(&data, &overfit_config(200), 3).unwrap();
        assert!(run.aborted.is_none());
        let first = run.history.epochs[0].loss.total;
        let last = run.history.epochs.last().unwrap().loss.total;
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
        let acc = run.history.epochs.last().unwrap().theta_accuracy;
        assert!(acc >= 0.95, "theta accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = overfit_set(20, 2);
        let cfg = overfit_config(3);
        let a = train(&data, &cfg, 5).unwrap();
        let b = train(&data, &cfg, 5).unwrap();
        assert_eq!(a.model.params, b.model.params);
        let (la, lb) = (
            a.history.epochs.last().unwrap().loss.total,
            b.history.epochs.last().unwrap().loss.total,
        );
        assert!((la - lb).abs() < 1e-9);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = single.install(|| train(&data, &cfg, 5).unwrap());
        assert_eq!(a.model.params, c.model.params);
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let data = overfit_set(8, 3);
        let run = train(&data, &overfit_config(2), 0).unwrap();
        let csv = run.history.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,total"));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            train(&[], &overfit_config(1), 0),
            Err(ModelError::EmptyDataset)
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
    }
}
