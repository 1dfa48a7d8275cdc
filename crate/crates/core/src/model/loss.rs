//! Supervision targets and the composite regional grasp loss.

use std::f64::consts::{FRAC_PI_2, PI};

use super::anchors::AnchorSet;
use super::network::{softmax, PredictionGrad, RegionPrediction};
use super::ModelConfig;
use crate::geometry::{RegionalGrasp, LABEL_RADIUS};

/// A regional label together with its quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub grasp: RegionalGrasp,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTargets {
    pub valid: bool,
    pub theta_bin: usize,
    pub theta_res: f64,
    pub beta_multi: Vec<bool>,
    pub gamma_multi: Vec<bool>,
    /// `(combination index, width / max_width)` for each positive combination.
    pub width_targets: Vec<(usize, f64)>,
    pub offset_norm: [f64; 3],
}

impl TrainTargets {
    pub fn empty(cfg: &ModelConfig) -> Self {
        TrainTargets {
            valid: false,
            theta_bin: 0,
            theta_res: 0.0,
            beta_multi: vec![false; cfg.n_anchor],
            gamma_multi: vec![false; cfg.n_anchor],
            width_targets: Vec::new(),
            offset_norm: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub theta_cls: f64,
    pub theta_reg: f64,
    pub width: f64,
    pub offset: f64,
    pub anchor: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.total += o.total * s;
        self.theta_cls += o.theta_cls * s;
        self.theta_reg += o.theta_reg * s;
        self.width += o.width * s;
        self.offset += o.offset * s;
        self.anchor += o.anchor * s;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.theta_cls, self.theta_reg, self.width, self.offset, self.anchor]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn theta_bin_width(k_theta: usize) -> f64 {
    PI / k_theta as f64
}

pub fn theta_bin_center(bin: usize, k_theta: usize) -> f64 {
    -FRAC_PI_2 + (bin as f64 + 0.5) * theta_bin_width(k_theta)
}

pub fn theta_bin_of(theta: f64, k_theta: usize) -> usize {
    let b = ((theta + FRAC_PI_2) / theta_bin_width(k_theta)).floor();
    (b.max(0.0) as usize).min(k_theta - 1)
}

/// Supervision for one region: the highest-score label drives the theta, width
/// and offset targets, every label marks its nearest beta and gamma anchors.
pub fn assign_targets(labels: &[ScoredLabel], anchors: &AnchorSet, cfg: &ModelConfig) -> TrainTargets {
    let mut t = TrainTargets::empty(cfg);
    if labels.is_empty() {
        return t;
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[b].score.total_cmp(&labels[a].score).then(a.cmp(&b)));
    let primary = &labels[order[0]].grasp;
    let k = cfg.k_theta;
    let bin = theta_bin_of(primary.theta, k);
    t.valid = true;
    t.theta_bin = bin;
    t.theta_res = (primary.theta - theta_bin_center(bin, k)) / (0.5 * theta_bin_width(k));
    for (o, v) in t.offset_norm.iter_mut().zip(primary.dt.iter()) {
        *o = v / LABEL_RADIUS;
    }
    for &i in &order {
        let g = &labels[i].grasp;
        let bi = AnchorSet::nearest(&anchors.beta, g.beta);
        let gi = AnchorSet::nearest(&anchors.gamma, g.gamma);
        t.beta_multi[bi] = true;
        t.gamma_multi[gi] = true;
        let combo = bi * cfg.n_anchor + gi;
        if !t.width_targets.iter().any(|(c, _)| *c == combo) {
            t.width_targets.push((combo, (g.width / cfg.max_width).clamp(0.0, 1.0)));
        }
    }
    t
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary focal loss on a probability; zero when `p` equals the target.
pub fn focal_on_probability(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        if p >= 1.0 {
            0.0
        } else {
            -alpha * (1.0 - p).powf(gamma) * p.ln()
        }
    } else if p <= 0.0 {
        0.0
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (-p).ln_1p()
    }
}

/// Binary focal loss on a logit and its derivative with respect to the logit.
pub fn focal_on_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let log_q = -softplus(z);
    if positive {
        let q = 1.0 - p;
        let w = q.powf(gamma);
        (-alpha * w * log_p, alpha * w * (gamma * p * log_p - q))
    } else {
        let w = p.powf(gamma);
        (-(1.0 - alpha) * w * log_q, (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Composite loss and its gradient with respect to the prediction.
pub fn loss_and_grad(pred: &RegionPrediction, t: &TrainTargets, cfg: &ModelConfig) -> (LossBreakdown, PredictionGrad) {
    let w = cfg.loss_weights;
    let mut out = LossBreakdown::default();
    let mut grad = PredictionGrad::zeros(cfg);

    let supervise_anchor = t.valid || cfg.supervise_empty_regions;
    if supervise_anchor {
        let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
        for (logits, targets, dst) in [
            (&pred.beta_logits, &t.beta_multi, &mut grad.beta_logits),
            (&pred.gamma_logits, &t.gamma_multi, &mut grad.gamma_logits),
        ] {
            for i in 0..logits.len() {
                let (l, d) = focal_on_logit(logits[i], targets[i], a, g);
                out.anchor += l;
                dst[i] = w.d * d;
            }
        }
    }
    if !t.valid {
        out.total = w.d * out.anchor;
        return (out, grad);
    }

    let probs = softmax(&pred.theta_logits);
    let max = pred.theta_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + pred.theta_logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    out.theta_cls = lse - pred.theta_logits[t.theta_bin];
    for (i, p) in probs.iter().enumerate() {
        let onehot = if i == t.theta_bin { 1.0 } else { 0.0 };
        grad.theta_logits[i] = w.a * (p - onehot);
    }
    let e = pred.theta_residual[t.theta_bin] - t.theta_res;
    out.theta_reg = smooth_l1(e);
    grad.theta_residual[t.theta_bin] = w.a * smooth_l1_grad(e);

    if !t.width_targets.is_empty() {
        let n = t.width_targets.len() as f64;
        for &(c, target) in &t.width_targets {
            let e = pred.width_raw[c] - target;
            out.width += smooth_l1(e) / n;
            grad.width_raw[c] += w.b * smooth_l1_grad(e) / n;
        }
    }

    for i in 0..3 {
        let e = pred.offset[i] - t.offset_norm[i];
        out.offset += smooth_l1(e) / 3.0;
        grad.offset[i] = w.c * smooth_l1_grad(e) / 3.0;
    }

    out.total = w.a * (out.theta_cls + out.theta_reg) + w.b * out.width + w.c * out.offset + w.d * out.anchor;
    (out, grad)
}

/// Loss value only.
pub fn loss(pred: &RegionPrediction, t: &TrainTargets, cfg: &ModelConfig) -> LossBreakdown {
    loss_and_grad(pred, t, cfg).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn label(theta_deg: f64, gamma: f64, beta: f64, width: f64, score: f64) -> ScoredLabel {
        ScoredLabel {
            grasp: RegionalGrasp {
                dt: Vec3::new(0.01, -0.005, 0.002),
                theta: theta_deg.to_radians(),
                gamma,
                beta,
                width,
            },
            score,
        }
    }

    fn spaced_anchors(n: usize) -> AnchorSet {
        AnchorSet::uniform(n)
    }

    #[test]
    fn theta_twenty_degrees() {
        let cfg = ModelConfig::default();
        let t = assign_targets(&[label(20.0, 0.0, 0.0, 0.05, 0.9)], &spaced_anchors(7), &cfg);
        assert!(t.valid);
        assert_eq!(t.theta_bin, 3);
        assert!((t.theta_res - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(t.offset_norm, [0.01 / 0.02, -0.005 / 0.02, 0.002 / 0.02]);
    }

    #[test]
    fn theta_edges_clamp() {
        assert_eq!(theta_bin_of(FRAC_PI_2, 6), 5);
        assert_eq!(theta_bin_of(-FRAC_PI_2, 6), 0);
        assert_eq!(theta_bin_of(0.0, 6), 3);
    }

    #[test]
    fn gamma_on_anchor_is_one_hot() {
        let cfg = ModelConfig::default();
        let anchors = spaced_anchors(7);
        let t = assign_targets(&[label(0.0, anchors.gamma[2], 0.0, 0.05, 0.9)], &anchors, &cfg);
        let expected: Vec<bool> = (0..7).map(|i| i == 2).collect();
        assert_eq!(t.gamma_multi, expected);
    }

    #[test]
    fn multi_label_positives() {
        let cfg = ModelConfig::default();
        let anchors = spaced_anchors(7);
        let labels = [
            label(0.0, anchors.gamma[1] + 0.01, 0.0, 0.05, 0.9),
            label(10.0, anchors.gamma[5] - 0.01, 0.0, 0.07, 0.7),
        ];
        let t = assign_targets(&labels, &anchors, &cfg);
        let pos: Vec<usize> = (0..7).filter(|&i| t.gamma_multi[i]).collect();
        assert_eq!(pos, vec![1, 5]);
        assert_eq!(t.width_targets.len(), 2);
        assert!((t.width_targets[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_labels_is_invalid() {
        let cfg = ModelConfig::default();
        let t = assign_targets(&[], &spaced_anchors(7), &cfg);
        assert!(!t.valid);
        assert!(t.beta_multi.iter().all(|b| !b));
    }

    fn perfect_prediction(t: &TrainTargets, cfg: &ModelConfig) -> RegionPrediction {
        let mut width_raw = vec![0.3; cfg.n_combos()];
        for &(c, v) in &t.width_targets {
            width_raw[c] = v;
        }
        let mut theta_residual = vec![0.0; cfg.k_theta];
        theta_residual[t.theta_bin] = t.theta_res;
        let logit = |b: bool| if b { 40.0 } else { -40.0 };
        RegionPrediction {
            theta_logits: (0..cfg.k_theta).map(|i| logit(i == t.theta_bin)).collect(),
            theta_residual,
            beta_logits: t.beta_multi.iter().map(|&b| logit(b)).collect(),
            gamma_logits: t.gamma_multi.iter().map(|&b| logit(b)).collect(),
            width_raw,
            offset: t.offset_norm,
        }
    }

    #[test]
    fn perfect_prediction_has_zero_regression_terms() {
        let cfg = ModelConfig::default();
        let t = assign_targets(&[label(-37.0, 0.2, -0.1, 0.045, 0.8)], &spaced_anchors(7), &cfg);
        let l = loss(&perfect_prediction(&t, &cfg), &t, &cfg);
        assert_eq!(l.theta_reg, 0.0);
        assert_eq!(l.width, 0.0);
        assert_eq!(l.offset, 0.0);
        assert!(l.theta_cls < 1e-12 && l.anchor < 1e-12);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let cfg = ModelConfig::default();
        let t = assign_targets(&[label(5.0, 0.0, 0.0, 0.05, 0.9)], &spaced_anchors(7), &cfg);
        let mut pred = perfect_prediction(&t, &cfg);
        pred.theta_logits = vec![0.3; 6];
        let l = loss(&pred, &t, &cfg);
        assert!((l.theta_cls - 6f64.ln()).abs() < 1e-12);
        assert!((l.theta_cls - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn focal_vanishes_at_target() {
        for (p, y) in [(1.0, true), (0.0, false)] {
            assert_eq!(focal_on_probability(p, y, 0.25, 2.0), 0.0);
        }
        assert!(focal_on_probability(0.5, true, 0.25, 2.0) > 0.0);
    }

    #[test]
    fn focal_logit_form_matches_probability_form() {
        for &z in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let p = sigmoid(z);
            for y in [true, false] {
                let (l, d) = focal_on_logit(z, y, 0.25, 2.0);
                assert!((l - focal_on_probability(p, y, 0.25, 2.0)).abs() < 1e-12);
                let h = 1e-6;
                let fd = (focal_on_logit(z + h, y, 0.25, 2.0).0 - focal_on_logit(z - h, y, 0.25, 2.0).0) / (2.0 * h);
                assert!((d - fd).abs() < 1e-8, "z={z} y={y}: {d} vs {fd}");
            }
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut cfg = ModelConfig::default();
        cfg.loss_weights = super::super::LossWeights { a: 1.5, b: 2.5, c: 3.5, d: 4.5 };
        let t = assign_targets(&[label(50.0, 0.3, 0.1, 0.06, 0.9)], &spaced_anchors(7), &cfg);
        let pred = RegionPrediction {
            theta_logits: vec![0.1, -0.2, 0.3, 0.0, 0.5, -1.0],
            theta_residual: vec![0.2; 6],
            beta_logits: vec![0.1; 7],
            gamma_logits: vec![-0.3; 7],
            width_raw: vec![0.2; 49],
            offset: [0.9, -1.7, 0.1],
        };
        let l = loss(&pred, &t, &cfg);
        let w = cfg.loss_weights;
        let expected = w.a * (l.theta_cls + l.theta_reg) + w.b * l.width + w.c * l.offset + w.d * l.anchor;
        assert_eq!(l.total, expected);
        assert!(l.theta_cls >= 0.0 && l.theta_reg >= 0.0 && l.width >= 0.0 && l.offset >= 0.0 && l.anchor >= 0.0);
    }

    #[test]
    fn invalid_region_without_negative_supervision_is_zero() {
        let mut cfg = ModelConfig::default();
        cfg.supervise_empty_regions = false;
        let t = TrainTargets::empty(&cfg);
        let pred = RegionPrediction {
            theta_logits: vec![0.0; 6],
            theta_residual: vec![0.0; 6],
            beta_logits: vec![1.0; 7],
            gamma_logits: vec![1.0; 7],
            width_raw: vec![0.0; 49],
            offset: [0.0; 3],
        };
        let (l, g) = loss_and_grad(&pred, &t, &cfg);
        assert_eq!(l, LossBreakdown::default());
        assert!(g.beta_logits.iter().all(|v| *v == 0.0));

        cfg.supervise_empty_regions = true;
        let l = loss(&pred, &t, &cfg);
        assert!(l.anchor > 0.0);
        assert_eq!(l.total, l.anchor);
        assert_eq!(l.theta_cls + l.theta_reg + l.width + l.offset, 0.0);
    }
}
