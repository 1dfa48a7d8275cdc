//! Turning head outputs into scored camera-frame grasps, grasp NMS and the
//! spliced scene heatmap.

use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

use crate::geometry::{rotation_distance, Grasp, Mat3, RegionFrame, LABEL_RADIUS};
use crate::guidance::Heatmap;
use crate::model::loss::{theta_bin_center, theta_bin_width};
use crate::model::{AnchorSet, ModelConfig, RegionPrediction};

pub const NMS_TRANSLATION: f64 = 0.03;
pub const NMS_ROTATION: f64 = std::f64::consts::PI / 6.0;
pub const DEFAULT_SPLICE_RADIUS_PX: u32 = 6;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocError {
    #[error("region {0} has no source pixel")]
    MissingPixelProvenance(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedGrasp {
    pub grasp: Grasp,
    pub region_index: usize,
    /// `(theta bin, beta anchor, gamma anchor)`.
    pub combo: (usize, usize, usize),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Up to `top_k` grasps for one region, best first. Every (beta, gamma)
/// anchor pair yields one candidate sharing the decoded theta.
pub fn decode_region(
    pred: &RegionPrediction,
    frame: &RegionFrame,
    region_index: usize,
    anchors: &AnchorSet,
    cfg: &ModelConfig,
    top_k: usize,
) -> Vec<DecodedGrasp> {
    let k = cfg.k_theta;
    let probs = crate::model::network::softmax(&pred.theta_logits);
    let bin = crate::model::train::argmax(&probs);
    let theta = (theta_bin_center(bin, k) + pred.theta_residual[bin] * 0.5 * theta_bin_width(k)).clamp(-FRAC_PI_2, FRAC_PI_2);
    let mut off = nalgebra::Vector3::from(pred.offset);
    let n = off.norm();
    if n > 1.0 {
        off /= n;
    }
    let t = frame.center + off * LABEL_RADIUS;
    let na = anchors.len();
    let pb: Vec<f64> = pred.beta_logits.iter().map(|&z| sigmoid(z)).collect();
    let pg: Vec<f64> = pred.gamma_logits.iter().map(|&z| sigmoid(z)).collect();
    let mut out = Vec::with_capacity(na * na);
    for i in 0..na {
        for j in 0..na {
            let width = (pred.width_raw[i * na + j] * cfg.max_width).clamp(0.0, cfg.max_width);
            out.push(DecodedGrasp {
                grasp: Grasp {
                    t,
                    theta,
                    gamma: anchors.gamma[j],
                    beta: anchors.beta[i],
                    width,
                    score: (probs[bin] * pb[i] * pg[j]).clamp(0.0, 1.0),
                },
                region_index,
                combo: (bin, i, j),
            });
        }
    }
    out.sort_by(|a, b| b.grasp.score.total_cmp(&a.grasp.score));
    out.truncate(top_k);
    out
}

/// Indices of `grasps` sorted by descending score, ties in input order.
fn score_order(grasps: &[DecodedGrasp]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.sort_by(|&a, &b| grasps[b].grasp.score.total_cmp(&grasps[a].grasp.score));
    order
}

/// Greedy NMS: a grasp is suppressed when an already kept grasp is both closer
/// than `t_thresh` and within `r_thresh` geodesic rotation.
pub fn grasp_nms(grasps: &[DecodedGrasp], t_thresh: f64, r_thresh: f64) -> Vec<DecodedGrasp> {
    assert!(t_thresh > 0.0 && r_thresh > 0.0, "NMS thresholds must be positive");
    let rotations: Vec<Mat3> = grasps.iter().map(|g| g.grasp.rotation()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(grasps) {
        let suppressed = kept.iter().any(|&j| {
            (grasps[i].grasp.t - grasps[j].grasp.t).norm() < t_thresh && rotation_distance(&rotations[i], &rotations[j]) < r_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| grasps[i]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splice {
    pub map: Heatmap,
    /// Pixels covered by at least one region.
    pub painted: usize,
}

/// Paints each region's best score as a square of half-size `radius_px`
/// around its source pixel; overlaps keep the maximum.
pub fn splice_heatmap(regions: &[(RegionFrame, f64)], width: u32, height: u32, radius_px: u32) -> Result<Splice, PostprocError> {
    let mut map = Heatmap::zeros(width, height);
    let mut covered = vec![false; map.data.len()];
    for (i, (frame, score)) in regions.iter().enumerate() {
        let (pu, pv) = frame.source_pixel.ok_or(PostprocError::MissingPixelProvenance(i))?;
        let s = score.clamp(0.0, 1.0);
        for v in pv.saturating_sub(radius_px)..=(pv + radius_px).min(height - 1) {
            for u in pu.saturating_sub(radius_px)..=(pu + radius_px).min(width - 1) {
                let idx = v as usize * width as usize + u as usize;
                covered[idx] = true;
                if s > map.data[idx] {
                    map.data[idx] = s;
                }
            }
        }
    }
    Ok(Splice {
        map,
        painted: covered.iter().filter(|&&c| c).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RegionalGrasp, Vec3};
    use crate::model::{assign_targets, ScoredLabel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(n: usize, i: usize, hi: f64, lo: f64) -> Vec<f64> {
        (0..n).map(|k| if k == i { hi } else { lo }).collect()
    }

    fn ideal_prediction(cfg: &ModelConfig) -> RegionPrediction {
        RegionPrediction {
            theta_logits: one_hot(cfg.k_theta, 3, 50.0, -50.0),
            theta_residual: vec![0.0; cfg.k_theta],
            beta_logits: one_hot(cfg.n_anchor, 2, 50.0, -50.0),
            gamma_logits: one_hot(cfg.n_anchor, 5, 50.0, -50.0),
            width_raw: vec![0.5; cfg.n_combos()],
            offset: [0.0; 3],
        }
    }

    #[test]
    fn decode_arithmetic() {
        let cfg = ModelConfig::default();
        let anchors = AnchorSet::uniform(cfg.n_anchor);
        let frame = RegionFrame::new(Vec3::new(0.1, 0.2, 0.5));
        let out = decode_region(&ideal_prediction(&cfg), &frame, 4, &anchors, &cfg, 5);
        assert_eq!(out.len(), 5);
        let best = &out[0];
        assert!((best.grasp.theta - 15f64.to_radians()).abs() < 1e-12);
        assert_eq!((best.grasp.beta, best.grasp.gamma), (anchors.beta[2], anchors.gamma[5]));
        assert_eq!(best.grasp.t, frame.center);
        assert_eq!(best.region_index, 4);
        assert_eq!(best.combo, (3, 2, 5));
        assert!((best.grasp.width - 0.05).abs() < 1e-15);
        assert!(out.windows(2).all(|w| w[0].grasp.score >= w[1].grasp.score));
        assert_eq!(decode_region(&ideal_prediction(&cfg), &frame, 0, &anchors, &cfg, 100).len(), 49);
    }

    #[test]
    fn decode_clamps_out_of_range_outputs() {
        let cfg = ModelConfig::default();
        let mut p = ideal_prediction(&cfg);
        p.theta_logits = one_hot(cfg.k_theta, cfg.k_theta - 1, 9.0, 0.0);
        p.theta_residual = vec![7.0; cfg.k_theta];
        p.width_raw = vec![3.0; cfg.n_combos()];
        p.offset = [3.0, 4.0, 0.0];
        let frame = RegionFrame::new(Vec3::zeros());
        for d in decode_region(&p, &frame, 0, &AnchorSet::uniform(cfg.n_anchor), &cfg, 49) {
            assert!(d.grasp.theta <= FRAC_PI_2 && d.grasp.width <= cfg.max_width);
            assert!((0.0..=1.0).contains(&d.grasp.score));
            assert!((d.grasp.t.norm() - LABEL_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_inverts_assignment() {
        let cfg = ModelConfig::default();
        let anchors = AnchorSet::uniform(cfg.n_anchor);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let half_bin = 0.5 * theta_bin_width(cfg.k_theta);
        for _ in 0..2000 {
            let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let label = RegionalGrasp {
                dt: dir.normalize() * rng.random_range(0.0..LABEL_RADIUS),
                theta: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
                gamma: rng.random_range(-1.4..1.4),
                beta: rng.random_range(-1.4..1.4),
                width: rng.random_range(0.0..cfg.max_width),
            };
            let t = assign_targets(&[ScoredLabel { grasp: label, score: 0.8 }], &anchors, &cfg);
            let (combo, w) = t.width_targets[0];
            let mut pred = ideal_prediction(&cfg);
            pred.theta_logits = one_hot(cfg.k_theta, t.theta_bin, 50.0, -50.0);
            pred.theta_residual[t.theta_bin] = t.theta_res;
            pred.beta_logits = t.beta_multi.iter().map(|&b| if b { 50.0 } else { -50.0 }).collect();
            pred.gamma_logits = t.gamma_multi.iter().map(|&b| if b { 50.0 } else { -50.0 }).collect();
            pred.width_raw[combo] = w;
            pred.offset = t.offset_norm;
            let frame = RegionFrame::new(Vec3::new(0.0, 0.0, 0.6));
            let d = decode_region(&pred, &frame, 0, &anchors, &cfg, 1)[0];
            assert!((d.grasp.theta - label.theta).abs() <= half_bin);
            assert!((d.grasp.theta - label.theta).abs() < 1e-12);
            assert_eq!(d.grasp.beta, anchors.beta[AnchorSet::nearest(&anchors.beta, label.beta)]);
            assert_eq!(d.grasp.gamma, anchors.gamma[AnchorSet::nearest(&anchors.gamma, label.gamma)]);
            assert!((d.grasp.width - label.width).abs() < 1e-15);
            assert!((d.grasp.t - (frame.center + label.dt)).norm() < 1e-15);
        }
    }

    fn random_grasps(rng: &mut ChaCha8Rng, n: usize) -> Vec<DecodedGrasp> {
        (0..n)
            .map(|i| DecodedGrasp {
                grasp: Grasp {
                    t: Vec3::new(rng.random_range(0.0..0.15), rng.random_range(0.0..0.15), 0.5),
                    theta: rng.random_range(-1.5..1.5),
                    gamma: rng.random_range(-0.6..0.6),
                    beta: rng.random_range(-0.6..0.6),
                    width: 0.05,
                    // coarse scores so ties occur
                    score: (rng.random_range(0..20) as f64) / 20.0,
                },
                region_index: i,
                combo: (0, 0, 0),
            })
            .collect()
    }

    /// Repeatedly take the best remaining grasp and discard everything it
    /// suppresses.
    fn nms_oracle(grasps: &[DecodedGrasp], t: f64, r: f64) -> Vec<DecodedGrasp> {
        let mut remaining: Vec<usize> = (0..grasps.len()).collect();
        let mut out = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                if grasps[remaining[k]].grasp.score > grasps[remaining[best]].grasp.score {
                    best = k;
                }
            }
            let b = remaining.remove(best);
            let rb = grasps[b].grasp.rotation();
            remaining.retain(|&i| {
                let g = &grasps[i].grasp;
                !((g.t - grasps[b].grasp.t).norm() < t && rotation_distance(&g.rotation(), &rb) < r)
            });
            out.push(grasps[b]);
        }
        out
    }

    #[test]
    fn nms_simple_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grasps(&mut rng, 1)[0];
        assert_eq!(grasp_nms(&[g, g], NMS_TRANSLATION, NMS_ROTATION).len(), 1);
        let mut far = g;
        far.grasp.t.x += 0.1;
        assert_eq!(grasp_nms(&[g, far], NMS_TRANSLATION, NMS_ROTATION).len(), 2);
    }

    #[test]
    fn nms_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(1..=300);
            let g = random_grasps(&mut rng, n);
            assert_eq!(grasp_nms(&g, NMS_TRANSLATION, NMS_ROTATION), nms_oracle(&g, NMS_TRANSLATION, NMS_ROTATION));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn nms_ignores_permutations_of_distinct_scores(seed in 0u64..1000, n in 1usize..120) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = random_grasps(&mut rng, n);
            for (i, d) in g.iter_mut().enumerate() {
                d.grasp.score = (d.grasp.score + i as f64 * 1e-6).min(1.0);
            }
            let a = grasp_nms(&g, NMS_TRANSLATION, NMS_ROTATION);
            let mut shuffled = g.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut rng);
            prop_assert_eq!(a, grasp_nms(&shuffled, NMS_TRANSLATION, NMS_ROTATION));
        }
    }

    #[test]
    fn splice_cases() {
        let f = |u, v| RegionFrame::with_pixel(Vec3::zeros(), (u, v));
        let s = splice_heatmap(&[(f(10, 10), 0.7)], 40, 30, 0).unwrap();
        assert_eq!(s.painted, 1);
        assert_eq!(s.map.get(10, 10), 0.7);
        assert_eq!(s.map.data.iter().filter(|&&x| x > 0.0).count(), 1);
        let s = splice_heatmap(&[(f(10, 10), 0.4), (f(12, 10), 0.9)], 40, 30, 2).unwrap();
        assert_eq!(s.map.get(11, 10), 0.9);
        assert_eq!(s.map.get(8, 10), 0.4);
        assert_eq!(s.painted, 25 + 10);
        let s = splice_heatmap(&[(f(0, 0), 0.5), (f(39, 29), 0.5)], 40, 30, 3).unwrap();
        assert_eq!(s.painted, 32);
        assert_eq!(
            splice_heatmap(&[(f(1, 1), 0.1), (RegionFrame::new(Vec3::zeros()), 0.2)], 40, 30, 1),
            Err(PostprocError::MissingPixelProvenance(1))
        );
    }
}
