//! Non-uniform angle anchors fitted to the label distribution.
//!
//! Anchors start at the `(i + 0.5) / n` quantiles of the label angles and are
//! refined with one-dimensional Lloyd iterations. During training they are
//! re-fitted each epoch starting from their current position (anchor
//! shifting).

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use super::ModelError;

const LLOYD_TOLERANCE: f64 = 1e-4;
const LLOYD_MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl AnchorSet {
    /// Evenly spaced bin centers over `[-pi/2, pi/2]`.
    pub fn uniform(n: usize) -> Self {
        let v: Vec<f64> = (0..n)
            .map(|i| -FRAC_PI_2 + (i as f64 + 0.5) * PI / n as f64)
            .collect();
        AnchorSet {
            beta: v.clone(),
            gamma: v,
        }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// Index of the anchor nearest to `v`; ties go to the lower index.
    pub fn nearest(anchors: &[f64], v: f64) -> usize {
        let mut best = 0;
        for (i, a) in anchors.iter().enumerate() {
            if (a - v).abs() < (anchors[best] - v).abs() {
                best = i;
            }
        }
        best
    }

    pub fn is_well_formed(&self, min_sep: f64) -> bool {
        [&self.beta, &self.gamma].iter().all(|a| {
            a.windows(2).all(|w| w[1] - w[0] >= min_sep - 1e-12)
                && a.iter().all(|v| (-FRAC_PI_2..=FRAC_PI_2).contains(v))
        })
    }
}

/// Fits both anchor sets from scratch.
pub fn refit_anchors(betas: &[f64], gammas: &[f64], n_anchor: usize, min_sep: f64) -> Result<AnchorSet, ModelError> {
    Ok(AnchorSet {
        beta: fit_anchors_1d(betas, n_anchor, min_sep, None)?,
        gamma: fit_anchors_1d(gammas, n_anchor, min_sep, None)?,
    })
}

/// Re-fits both anchor sets starting from `current`.
pub fn shift_anchors(current: &AnchorSet, betas: &[f64], gammas: &[f64], min_sep: f64) -> Result<AnchorSet, ModelError> {
    Ok(AnchorSet {
        beta: fit_anchors_1d(betas, current.beta.len(), min_sep, Some(&current.beta))?,
        gamma: fit_anchors_1d(gammas, current.gamma.len(), min_sep, Some(&current.gamma))?,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// One-dimensional anchor fit: quantile (or given) initialisation, Lloyd
/// iterations until no anchor moves by more than `1e-4` rad, then spacing
/// enforcement.
pub fn fit_anchors_1d(values: &[f64], n: usize, min_sep: f64, init: Option<&[f64]>) -> Result<Vec<f64>, ModelError> {
    assert!(n >= 1);
    let mut sorted: Vec<f64> = values
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .map(|v| v.clamp(-FRAC_PI_2, FRAC_PI_2))
        .collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.is_empty() || (n > 1 && distinct.len() < n) {
        return Err(ModelError::DegenerateLabels);
    }
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    let mut anchors: Vec<f64> = match init {
        Some(a) if a.len() == n => a.to_vec(),
        _ => (0..n)
            .map(|i| quantile(&sorted, (i as f64 + 0.5) / n as f64))
            .collect(),
    };
    anchors.sort_by(f64::total_cmp);
    for _ in 0..LLOYD_MAX_ITERS {
        let mut moved: f64 = 0.0;
        let mut next = anchors.clone();
        let mut lo = 0;
        for i in 0..n {
            // values in [lo, hi) are nearest to anchor i; ties go to the lower anchor
            let hi = if i + 1 < n {
                let boundary = 0.5 * (anchors[i] + anchors[i + 1]);
                sorted.partition_point(|&v| v <= boundary)
            } else {
                sorted.len()
            };
            if hi > lo {
                next[i] = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            }
            moved = moved.max((next[i] - anchors[i]).abs());
            lo = hi.max(lo);
        }
        anchors = next;
        if moved < LLOYD_TOLERANCE {
            break;
        }
    }
    enforce_spacing(&mut anchors, min_sep);
    Ok(anchors)
}

/// Pushes anchors apart to at least `min_sep` while keeping them inside
/// `[-pi/2, pi/2]`.
fn enforce_spacing(a: &mut [f64], min_sep: f64) {
    let n = a.len();
    if n == 0 {
        return;
    }
    let sep = min_sep.min(PI / n as f64);
    a[0] = a[0].max(-FRAC_PI_2);
    for i in 1..n {
        a[i] = a[i].max(a[i - 1] + sep);
    }
    if a[n - 1] > FRAC_PI_2 {
        a[n - 1] = FRAC_PI_2;
        for i in (0..n - 1).rev() {
            a[i] = a[i].min(a[i + 1] - sep);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_distribution_gives_quantiles() {
        let (lo, hi) = (-1.2, 1.0);
        let n = 100_000;
        let stratified: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / n as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        for (vals, tol) in [(&stratified, 1e-3), (&random, 5e-3)] {
            let a = fit_anchors_1d(vals, 5, 2f64.to_radians(), None).unwrap();
            for (i, v) in a.iter().enumerate() {
                let q = lo + (hi - lo) * (i as f64 + 0.5) / 5.0;
                assert!((v - q).abs() < tol, "anchor {i}: {v} vs {q}");
            }
        }
    }

    #[test]
    fn bimodal_two_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 60f64.to_radians();
        let vals: Vec<f64> = (0..20_000)
            .map(|i| {
                let s = if i % 2 == 0 { c } else { -c };
                s + rng.random_range(-0.05..0.05)
            })
            .collect();
        let a = fit_anchors_1d(&vals, 2, 2f64.to_radians(), None).unwrap();
        assert!((a[0] + c).abs() < 2e-3, "{a:?}");
        assert!((a[1] - c).abs() < 2e-3, "{a:?}");
    }

    #[test]
    fn single_anchor_is_mean() {
        let vals = [0.1, 0.2, 0.6];
        let a = fit_anchors_1d(&vals, 1, 0.0, None).unwrap();
        assert!((a[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn identical_values_are_degenerate() {
        assert!(matches!(
            fit_anchors_1d(&[0.2; 50], 3, 0.01, None),
            Err(ModelError::DegenerateLabels)
        ));
    }

    #[test]
    fn spacing_is_enforced() {
        let mut vals = vec![0.0; 100];
        vals.extend([0.0001, 0.0002, 1.0]);
        let a = fit_anchors_1d(&vals, 3, 0.1, None).unwrap();
        assert!(a.windows(2).all(|w| w[1] - w[0] >= 0.1 - 1e-12), "{a:?}");
        let mut edge = vec![FRAC_PI_2; 10];
        edge.extend([FRAC_PI_2 - 1e-3, FRAC_PI_2 - 2e-3]);
        let a = fit_anchors_1d(&edge, 3, 0.05, None).unwrap();
        assert!(a.iter().all(|v| *v <= FRAC_PI_2));
        assert!(a.windows(2).all(|w| w[1] - w[0] >= 0.05 - 1e-12), "{a:?}");
    }

    #[test]
    fn nearest_prefers_lower_on_tie() {
        assert_eq!(AnchorSet::nearest(&[-1.0, 1.0], 0.0), 0);
        assert_eq!(AnchorSet::nearest(&[-1.0, 0.5, 1.0], 0.8), 2);
    }
}
