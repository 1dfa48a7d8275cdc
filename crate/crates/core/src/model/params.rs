//! Flat parameter vector and its named layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Dense layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn inputs(&self) -> usize {
        self.w.cols
    }

    pub fn outputs(&self) -> usize {
        self.w.rows
    }

    pub fn weight<'a>(&self, v: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.w.rows, self.w.cols), &v[self.w.range()]).unwrap()
    }

    pub fn bias<'a>(&self, v: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&v[self.b.range()])
    }

    pub fn weight_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.w.rows, self.w.cols), &mut v[self.w.range()]).unwrap()
    }

    pub fn bias_mut<'a>(&self, v: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut v[self.b.range()])
    }
}

/// `relu(x + W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub res: ResBlock,
    pub affine_scale: Slot,
    pub affine_shift: Slot,
    pub transfer: Linear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed: Linear,
    pub stages: Vec<StageLayout>,
    pub post: ResBlock,
    pub collision: (Linear, Linear),
    pub theta: (Linear, Linear),
    pub anchor: (Linear, Linear),
    pub offset: (Linear, Linear),
    names: Vec<(String, Slot)>,
    len: usize,
}

struct Builder {
    offset: usize,
    names: Vec<(String, Slot)>,
}

impl Builder {
    fn slot(&mut self, name: String, rows: usize, cols: usize) -> Slot {
        let s = Slot {
            offset: self.offset,
            rows,
            cols,
        };
        self.offset += s.len();
        self.names.push((name, s));
        s
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Linear {
        Linear {
            w: self.slot(format!("{name}.weight"), outputs, inputs),
            b: self.slot(format!("{name}.bias"), outputs, 1),
        }
    }

    fn res(&mut self, name: &str, dim: usize) -> ResBlock {
        ResBlock {
            l1: self.linear(&format!("{name}.fc1"), dim, dim),
            l2: self.linear(&format!("{name}.fc2"), dim, dim),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.head_hidden;
        let feat = cfg.feature_dim();
        let combos = cfg.n_combos();
        let mut b = Builder {
            offset: 0,
            names: Vec::new(),
        };
        let embed = b.linear("embed", 3, d);
        let stages = (0..cfg.stage_count)
            .map(|s| StageLayout {
                res: b.res(&format!("stage{s}.res"), d),
                affine_scale: b.slot(format!("stage{s}.affine.scale"), d, 1),
                affine_shift: b.slot(format!("stage{s}.affine.shift"), d, 1),
                transfer: b.linear(&format!("stage{s}.transfer"), 2 * d + 3, d),
            })
            .collect();
        let post = b.res("post.res", d);
        let collision = (
            b.linear("collision.fc1", feat, h),
            b.linear("collision.fc2", h, combos),
        );
        let theta = (
            b.linear("theta.fc1", feat + combos, h),
            b.linear("theta.fc2", h, 2 * cfg.k_theta),
        );
        let anchor = (
            b.linear("anchor.fc1", feat + combos + cfg.k_theta, h),
            b.linear("anchor.fc2", h, 2 * cfg.n_anchor),
        );
        let offset = (
            b.linear("offset.fc1", feat + combos, h),
            b.linear("offset.fc2", h, 3),
        );
        Layout {
            embed,
            stages,
            post,
            collision,
            theta,
            anchor,
            offset,
            len: b.offset,
            names: b.names,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Named slices in storage order.
    pub fn named_slots(&self) -> &[(String, Slot)] {
        &self.names
    }

    fn linears(&self) -> Vec<Linear> {
        let mut out = vec![self.embed];
        for s in &self.stages {
            out.extend([s.res.l1, s.res.l2, s.transfer]);
        }
        out.extend([self.post.l1, self.post.l2]);
        for (a, b) in [self.collision, self.theta, self.anchor, self.offset] {
            out.extend([a, b]);
        }
        out
    }
}

/// All learnable weights of the encoder and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases, unit affine scales and
    /// zero affine shifts. Deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let layout = Layout::new(cfg);
        let mut values = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lin in layout.linears() {
            let bound = (1.0 / lin.inputs() as f64).sqrt();
            for v in &mut values[lin.w.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        for s in &layout.stages {
            values[s.affine_scale.range()].fill(1.0);
        }
        ModelParams { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
