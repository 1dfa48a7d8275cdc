//! Encoder and heads of the local grasp model with hand-written backward
//! passes.
//!
//! The encoder follows a light PointMLP layout. Points are embedded by a
//! shared linear layer; each stage applies a per-point residual block, picks
//! group centers by furthest point sampling, gathers ball neighbourhoods,
//! normalises neighbour features relative to their center (geometric affine
//! module) and max-pools a shared transfer layer over each group. A final
//! residual block is followed by global max and mean pooling.
//!
//! Sampling and grouping depend only on point coordinates, so they are
//! computed once per region in a [`RegionPlan`] and reused across epochs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{Layout, Linear, ResBlock};
use super::{ModelConfig, ModelError, ModelParams};
use crate::cloud::{farthest_point_sample, nearest_index};
use crate::geometry::Vec3;

const AFFINE_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct StagePlan {
    centers: Vec<usize>,
    /// Group `g` spans `members[offsets[g]..offsets[g + 1]]`.
    offsets: Vec<usize>,
    members: Vec<usize>,
    /// Neighbour minus center position for every member row (scaled units).
    rel: Array2<f64>,
}

/// Coordinate-only part of the encoder: deduplicated, capped and scaled input
/// points plus the sampling and grouping indices of every stage.
#[derive(Debug, Clone)]
pub struct RegionPlan {
    points: Array2<f64>,
    stages: Vec<StagePlan>,
}

fn dedup_points(points: &[Vec3]) -> Vec<Vec3> {
    let key = |p: &Vec3| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (key(&points[i]), i));
    let mut keep = vec![false; points.len()];
    for (n, &i) in order.iter().enumerate() {
        if n == 0 || key(&points[order[n - 1]]) != key(&points[i]) {
            keep[i] = true;
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

impl RegionPlan {
    /// Builds the plan for points given in the region frame.
    pub fn new(points: &[Vec3], cfg: &ModelConfig) -> Result<Self, ModelError> {
        if points.is_empty() {
            return Err(ModelError::EmptyRegion);
        }
        let origin = Vec3::zeros();
        let mut pts: Vec<Vec3> = dedup_points(points)
            .into_iter()
            .map(|p| p * cfg.coord_scale)
            .collect();
        if pts.len() > cfg.n_points {
            let seed = nearest_index(&pts, &origin).expect("non-empty");
            let keep = farthest_point_sample(&pts, cfg.n_points, seed)
                .map_err(|_| ModelError::EmptyRegion)?;
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
        let mut level = pts.clone();
        let mut stages = Vec::with_capacity(cfg.stage_count);
        for s in 0..cfg.stage_count {
            let m = level.len();
            let count = m.div_ceil(cfg.stage_downsample).max(1);
            let seed = nearest_index(&level, &origin).expect("non-empty");
            let centers =
                farthest_point_sample(&level, count, seed).map_err(|_| ModelError::EmptyRegion)?;
            let radius = cfg.group_radius * cfg.coord_scale * (1u64 << s) as f64;
            let r2 = radius * radius;
            let mut offsets = vec![0];
            let mut members = Vec::new();
            let mut rel = Vec::new();
            for &c in &centers {
                let pc = level[c];
                let mut near: Vec<(f64, usize)> = level
                    .iter()
                    .enumerate()
                    .map(|(j, p)| ((p - pc).norm_squared(), j))
                    .filter(|(d, _)| *d <= r2)
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(cfg.group_size);
                for (_, j) in near {
                    members.push(j);
                    let d = level[j] - pc;
                    rel.extend([d.x, d.y, d.z]);
                }
                offsets.push(members.len());
            }
            let rows = members.len();
            level = centers.iter().map(|&c| level[c]).collect();
            stages.push(StagePlan {
                centers,
                offsets,
                members,
                rel: Array2::from_shape_vec((rows, 3), rel).unwrap(),
            });
        }
        let flat: Vec<f64> = pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Ok(RegionPlan {
            points: Array2::from_shape_vec((pts.len(), 3), flat).unwrap(),
            stages,
        })
    }

    /// Number of points entering the encoder after deduplication and capping.
    pub fn point_count(&self) -> usize {
        self.points.nrows()
    }
}

/// Raw head outputs for one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub theta_logits: Vec<f64>,
    /// Per-bin residual in units of half a bin width.
    pub theta_residual: Vec<f64>,
    pub beta_logits: Vec<f64>,
    pub gamma_logits: Vec<f64>,
    /// Width per (beta anchor, gamma anchor) pair, index `i * n_anchor + j`,
    /// in units of the maximum width.
    pub width_raw: Vec<f64>,
    /// Center offset in units of the label radius.
    pub offset: [f64; 3],
}

impl RegionPrediction {
    pub fn is_finite(&self) -> bool {
        self.theta_logits
            .iter()
            .chain(&self.theta_residual)
            .chain(&self.beta_logits)
            .chain(&self.gamma_logits)
            .chain(&self.width_raw)
            .chain(&self.offset)
            .all(|v| v.is_finite())
    }
}

/// Gradient of the loss with respect to every head output.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad {
    pub theta_logits: Vec<f64>,
    pub theta_residual: Vec<f64>,
    pub beta_logits: Vec<f64>,
    pub gamma_logits: Vec<f64>,
    pub width_raw: Vec<f64>,
    pub offset: [f64; 3],
}

impl PredictionGrad {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        PredictionGrad {
            theta_logits: vec![0.0; cfg.k_theta],
            theta_residual: vec![0.0; cfg.k_theta],
            beta_logits: vec![0.0; cfg.n_anchor],
            gamma_logits: vec![0.0; cfg.n_anchor],
            width_raw: vec![0.0; cfg.n_combos()],
            offset: [0.0; 3],
        }
    }
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

fn affine(x: &Array2<f64>, lin: &Linear, p: &[f64]) -> Array2<f64> {
    let mut z = x.dot(&lin.weight(p).t());
    z += &lin.bias(p);
    z
}

/// Accumulates weight and bias gradients and returns the input gradient.
fn affine_backward(
    x: &Array2<f64>,
    dz: &Array2<f64>,
    lin: &Linear,
    p: &[f64],
    g: &mut [f64],
) -> Array2<f64> {
    general_mat_mul(1.0, &dz.t(), x, 1.0, &mut lin.weight_mut(g));
    let db = dz.sum_axis(Axis(0));
    lin.bias_mut(g).zip_mut_with(&db, |a, b| *a += b);
    dz.dot(&lin.weight(p))
}

fn mask_relu(d: &mut Array2<f64>, out: &Array2<f64>) {
    d.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

#[derive(Debug, Clone)]
struct ResCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

fn res_forward(x: Array2<f64>, blk: &ResBlock, p: &[f64]) -> ResCache {
    let mut hidden = affine(&x, &blk.l1, p);
    relu_inplace(&mut hidden);
    let mut out = affine(&hidden, &blk.l2, p);
    out += &x;
    relu_inplace(&mut out);
    ResCache {
        input: x,
        hidden,
        out,
    }
}

fn res_backward(cache: &ResCache, dout: &Array2<f64>, blk: &ResBlock, p: &[f64], g: &mut [f64]) -> Array2<f64> {
    let mut ds = dout.clone();
    mask_relu(&mut ds, &cache.out);
    let mut dh = affine_backward(&cache.hidden, &ds, &blk.l2, p, g);
    mask_relu(&mut dh, &cache.hidden);
    let mut dx = affine_backward(&cache.input, &dh, &blk.l1, p, g);
    dx += &ds;
    dx
}

#[derive(Debug, Clone)]
struct StageCache {
    res: ResCache,
    diffs: Array2<f64>,
    sigma: f64,
    normed: Array2<f64>,
    grouped: Array2<f64>,
    transfer_out: Array2<f64>,
    /// Winning member row per (group, channel).
    argmax: Array2<usize>,
}

#[derive(Debug, Clone)]
struct EncoderCache {
    embed_out: Array2<f64>,
    stages: Vec<StageCache>,
    post: ResCache,
    max_rows: Vec<usize>,
}

fn column_max_pool(x: ArrayView2<f64>) -> (Vec<f64>, Vec<usize>) {
    let cols = x.ncols();
    let mut best = vec![f64::NEG_INFINITY; cols];
    let mut idx = vec![0usize; cols];
    for (r, row) in x.outer_iter().enumerate() {
        for c in 0..cols {
            if row[c] > best[c] {
                best[c] = row[c];
                idx[c] = r;
            }
        }
    }
    (best, idx)
}

fn encoder_forward_cached(plan: &RegionPlan, cfg: &ModelConfig, layout: &Layout, p: &[f64]) -> (Array1<f64>, EncoderCache) {
    let d = cfg.embed_dim;
    let mut embed_out = affine(&plan.points, &layout.embed, p);
    relu_inplace(&mut embed_out);
    let mut h = embed_out.clone();
    let mut stages = Vec::with_capacity(plan.stages.len());
    for (sp, sl) in plan.stages.iter().zip(&layout.stages) {
        let res = res_forward(h, &sl.res, p);
        let r = &res.out;
        let rows = sp.members.len();
        let mut diffs = Array2::<f64>::zeros((rows, d));
        for g in 0..sp.centers.len() {
            let c = r.row(sp.centers[g]);
            for row in sp.offsets[g]..sp.offsets[g + 1] {
                let j = r.row(sp.members[row]);
                let mut out = diffs.row_mut(row);
                for k in 0..d {
                    out[k] = j[k] - c[k];
                }
            }
        }
        let mean_sq = diffs.iter().map(|v| v * v).sum::<f64>() / (rows * d) as f64;
        let sigma = (mean_sq + AFFINE_EPS).sqrt();
        let normed = &diffs / sigma;
        let scale = ArrayView1::from(&p[sl.affine_scale.range()]);
        let shift = ArrayView1::from(&p[sl.affine_shift.range()]);
        let mut grouped = Array2::<f64>::zeros((rows, 2 * d + 3));
        for g in 0..sp.centers.len() {
            let c = r.row(sp.centers[g]);
            for row in sp.offsets[g]..sp.offsets[g + 1] {
                let mut out = grouped.row_mut(row);
                let nrow = normed.row(row);
                for k in 0..d {
                    out[k] = nrow[k] * scale[k] + shift[k];
                    out[d + k] = c[k];
                }
                for k in 0..3 {
                    out[2 * d + k] = sp.rel[[row, k]];
                }
            }
        }
        let mut transfer_out = affine(&grouped, &sl.transfer, p);
        relu_inplace(&mut transfer_out);
        let groups = sp.centers.len();
        let mut next = Array2::<f64>::zeros((groups, d));
        let mut argmax = Array2::<usize>::zeros((groups, d));
        for g in 0..groups {
            let (lo, hi) = (sp.offsets[g], sp.offsets[g + 1]);
            let (vals, idx) = column_max_pool(transfer_out.slice(s![lo..hi, ..]));
            for k in 0..d {
                next[[g, k]] = vals[k];
                argmax[[g, k]] = lo + idx[k];
            }
        }
        stages.push(StageCache {
            res,
            diffs,
            sigma,
            normed,
            grouped,
            transfer_out,
            argmax,
        });
        h = next;
    }
    let post = res_forward(h, &layout.post, p);
    let (maxv, max_rows) = column_max_pool(post.out.view());
    let mean = post.out.mean_axis(Axis(0)).expect("non-empty");
    let mut feature = Array1::<f64>::zeros(2 * d);
    for k in 0..d {
        feature[k] = maxv[k];
        feature[d + k] = mean[k];
    }
    (
        feature,
        EncoderCache {
            embed_out,
            stages,
            post,
            max_rows,
        },
    )
}

fn encoder_backward(plan: &RegionPlan, cache: &EncoderCache, dfeat: &Array1<f64>, cfg: &ModelConfig, layout: &Layout, p: &[f64], g: &mut [f64]) {
    let d = cfg.embed_dim;
    let m = cache.post.out.nrows();
    let mut dpost = Array2::<f64>::zeros((m, d));
    for k in 0..d {
        dpost[[cache.max_rows[k], k]] += dfeat[k];
        let share = dfeat[d + k] / m as f64;
        for r in 0..m {
            dpost[[r, k]] += share;
        }
    }
    let mut dh = res_backward(&cache.post, &dpost, &layout.post, p, g);
    for ((sp, sl), sc) in plan.stages.iter().zip(&layout.stages).rev().zip(cache.stages.iter().rev()) {
        let rows = sp.members.len();
        let mut dy = Array2::<f64>::zeros((rows, d));
        for grp in 0..sp.centers.len() {
            for k in 0..d {
                dy[[sc.argmax[[grp, k]], k]] += dh[[grp, k]];
            }
        }
        mask_relu(&mut dy, &sc.transfer_out);
        let dgrouped = affine_backward(&sc.grouped, &dy, &sl.transfer, p, g);
        let scale = &p[sl.affine_scale.range()];
        let mut dnorm = Array2::<f64>::zeros((rows, d));
        {
            let mut gscale = vec![0.0; d];
            let mut gshift = vec![0.0; d];
            for row in 0..rows {
                for k in 0..d {
                    let da = dgrouped[[row, k]];
                    gscale[k] += da * sc.normed[[row, k]];
                    gshift[k] += da;
                    dnorm[[row, k]] = da * scale[k];
                }
            }
            for (dst, v) in g[sl.affine_scale.range()].iter_mut().zip(gscale) {
                *dst += v;
            }
            for (dst, v) in g[sl.affine_shift.range()].iter_mut().zip(gshift) {
                *dst += v;
            }
        }
        let n = (rows * d) as f64;
        let dot: f64 = dnorm.iter().zip(sc.diffs.iter()).map(|(a, b)| a * b).sum();
        let coef = dot / (sc.sigma * sc.sigma * sc.sigma * n);
        let ddiff = &dnorm / sc.sigma - &(&sc.diffs * coef);
        let mut dr = Array2::<f64>::zeros(sc.res.out.raw_dim());
        for grp in 0..sp.centers.len() {
            let c = sp.centers[grp];
            for row in sp.offsets[grp]..sp.offsets[grp + 1] {
                let j = sp.members[row];
                for k in 0..d {
                    let v = ddiff[[row, k]];
                    dr[[j, k]] += v;
                    dr[[c, k]] += dgrouped[[row, d + k]] - v;
                }
            }
        }
        dh = res_backward(&sc.res, &dr, &sl.res, p, g);
    }
    let mut dembed = dh;
    mask_relu(&mut dembed, &cache.embed_out);
    affine_backward(&plan.points, &dembed, &layout.embed, p, g);
}

/// Two-layer head: `W2 relu(W1 x + b1) + b2`.
struct HeadCache {
    input: Array1<f64>,
    hidden: Array1<f64>,
}

fn head_forward(x: Array1<f64>, heads: &(Linear, Linear), p: &[f64]) -> (Array1<f64>, HeadCache) {
    let mut hidden = heads.0.weight(p).dot(&x);
    hidden += &heads.0.bias(p);
    hidden.mapv_inplace(|v| v.max(0.0));
    let mut out = heads.1.weight(p).dot(&hidden);
    out += &heads.1.bias(p);
    (out, HeadCache { input: x, hidden })
}

fn vec_affine_backward(x: &Array1<f64>, dz: &Array1<f64>, lin: &Linear, p: &[f64], g: &mut [f64]) -> Array1<f64> {
    {
        let mut gw = lin.weight_mut(g);
        for (i, mut row) in gw.outer_iter_mut().enumerate() {
            let di = dz[i];
            if di != 0.0 {
                row.scaled_add(di, x);
            }
        }
    }
    lin.bias_mut(g).zip_mut_with(dz, |a, b| *a += b);
    lin.weight(p).t().dot(dz)
}

fn head_backward(cache: &HeadCache, dout: &Array1<f64>, heads: &(Linear, Linear), p: &[f64], g: &mut [f64]) -> Array1<f64> {
    let mut dh = vec_affine_backward(&cache.hidden, dout, &heads.1, p, g);
    dh.zip_mut_with(&cache.hidden, |a, &h| {
        if h <= 0.0 {
            *a = 0.0;
        }
    });
    vec_affine_backward(&cache.input, &dh, &heads.0, p, g)
}

fn concat(parts: &[ArrayView1<f64>]) -> Array1<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(|v| v.len()).sum());
    for part in parts {
        out.extend(part.iter().copied());
    }
    Array1::from(out)
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct HeadsCache {
    collision: HeadCache,
    theta: HeadCache,
    anchor: HeadCache,
    offset: HeadCache,
    soft: Vec<f64>,
}

fn heads_forward_cached(feature: &Array1<f64>, cfg: &ModelConfig, layout: &Layout, p: &[f64]) -> (RegionPrediction, HeadsCache) {
    let k = cfg.k_theta;
    let n = cfg.n_anchor;
    let (width, collision) = head_forward(feature.clone(), &layout.collision, p);
    let (theta_out, theta) = head_forward(concat(&[feature.view(), width.view()]), &layout.theta, p);
    let logits = theta_out.slice(s![..k]).to_vec();
    let soft = softmax(&logits);
    let soft_view = Array1::from(soft.clone());
    let (anchor_out, anchor) = head_forward(
        concat(&[feature.view(), width.view(), soft_view.view()]),
        &layout.anchor,
        p,
    );
    let (offset_out, offset) = head_forward(concat(&[feature.view(), width.view()]), &layout.offset, p);
    let pred = RegionPrediction {
        theta_logits: logits,
        theta_residual: theta_out.slice(s![k..]).to_vec(),
        beta_logits: anchor_out.slice(s![..n]).to_vec(),
        gamma_logits: anchor_out.slice(s![n..]).to_vec(),
        width_raw: width.to_vec(),
        offset: [offset_out[0], offset_out[1], offset_out[2]],
    };
    (
        pred,
        HeadsCache {
            collision,
            theta,
            anchor,
            offset,
            soft,
        },
    )
}

fn heads_backward(cache: &HeadsCache, dpred: &PredictionGrad, cfg: &ModelConfig, layout: &Layout, p: &[f64], g: &mut [f64]) -> Array1<f64> {
    let f = cfg.feature_dim();
    let c = cfg.n_combos();
    let k = cfg.k_theta;
    let mut dfeat = Array1::<f64>::zeros(f);
    let mut dwidth = Array1::from(dpred.width_raw.clone());

    let doff = head_backward(&cache.offset, &Array1::from(dpred.offset.to_vec()), &layout.offset, p, g);
    dfeat += &doff.slice(s![..f]);
    dwidth += &doff.slice(s![f..]);

    let danchor_out = concat(&[
        ArrayView1::from(&dpred.beta_logits),
        ArrayView1::from(&dpred.gamma_logits),
    ]);
    let din = head_backward(&cache.anchor, &danchor_out, &layout.anchor, p, g);
    dfeat += &din.slice(s![..f]);
    dwidth += &din.slice(s![f..f + c]);
    let dsoft = din.slice(s![f + c..]);
    let inner: f64 = cache.soft.iter().zip(dsoft.iter()).map(|(s, d)| s * d).sum();
    let mut dtheta_out = Array1::<f64>::zeros(2 * k);
    for i in 0..k {
        dtheta_out[i] = dpred.theta_logits[i] + cache.soft[i] * (dsoft[i] - inner);
        dtheta_out[k + i] = dpred.theta_residual[i];
    }
    let din = head_backward(&cache.theta, &dtheta_out, &layout.theta, p, g);
    dfeat += &din.slice(s![..f]);
    dwidth += &din.slice(s![f..]);

    dfeat += &head_backward(&cache.collision, &dwidth, &layout.collision, p, g);
    dfeat
}

/// Stateless view of the network for a fixed configuration.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub layout: Layout,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Network {
            config: config.clone(),
            layout: Layout::new(config),
        })
    }

    fn check(&self, params: &ModelParams) -> Result<(), ModelError> {
        if params.len() != self.layout.len() {
            return Err(ModelError::ParamCount {
                expected: self.layout.len(),
                got: params.len(),
            });
        }
        Ok(())
    }

    pub fn encode_plan(&self, plan: &RegionPlan, params: &ModelParams) -> Result<Vec<f64>, ModelError> {
        self.check(params)?;
        let (f, _) = encoder_forward_cached(plan, &self.config, &self.layout, &params.values);
        Ok(f.to_vec())
    }

    /// Global feature (`2 * embed_dim` values) of a region given in its local frame.
    pub fn encode(&self, points: &[Vec3], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
        let plan = RegionPlan::new(points, &self.config)?;
        self.encode_plan(&plan, params)
    }

    pub fn heads(&self, feature: &[f64], params: &ModelParams) -> Result<RegionPrediction, ModelError> {
        self.check(params)?;
        if feature.len() != self.config.feature_dim() {
            return Err(ModelError::FeatureSize {
                expected: self.config.feature_dim(),
                got: feature.len(),
            });
        }
        let (pred, _) = heads_forward_cached(&Array1::from(feature.to_vec()), &self.config, &self.layout, &params.values);
        Ok(pred)
    }

    pub fn predict_plan(&self, plan: &RegionPlan, params: &ModelParams) -> Result<RegionPrediction, ModelError> {
        self.check(params)?;
        let (f, _) = encoder_forward_cached(plan, &self.config, &self.layout, &params.values);
        let (pred, _) = heads_forward_cached(&f, &self.config, &self.layout, &params.values);
        Ok(pred)
    }

    pub fn predict(&self, points: &[Vec3], params: &ModelParams) -> Result<RegionPrediction, ModelError> {
        let plan = RegionPlan::new(points, &self.config)?;
        self.predict_plan(&plan, params)
    }

    /// Runs forward, lets `loss` turn the prediction into a value and output
    /// gradient, then backpropagates into `grad` (accumulating).
    pub(crate) fn forward_backward<L>(
        &self,
        plan: &RegionPlan,
        params: &ModelParams,
        grad: &mut [f64],
        loss: L,
    ) -> (RegionPrediction, super::LossBreakdown)
    where
        L: FnOnce(&RegionPrediction) -> (super::LossBreakdown, PredictionGrad),
    {
        let p = &params.values;
        let (feature, enc) = encoder_forward_cached(plan, &self.config, &self.layout, p);
        let (pred, heads) = heads_forward_cached(&feature, &self.config, &self.layout, p);
        let (breakdown, dpred) = loss(&pred);
        if breakdown.total != 0.0 || dpred_nonzero(&dpred) {
            let dfeat = heads_backward(&heads, &dpred, &self.config, &self.layout, p, grad);
            encoder_backward(plan, &enc, &dfeat, &self.config, &self.layout, p, grad);
        }
        (pred, breakdown)
    }
}

fn dpred_nonzero(d: &PredictionGrad) -> bool {
    d.theta_logits
        .iter()
        .chain(&d.theta_residual)
        .chain(&d.beta_logits)
        .chain(&d.gamma_logits)
        .chain(&d.width_raw)
        .chain(&d.offset)
        .any(|v| *v != 0.0)
}
