//! Frame classifier `h`: a linear feature adapter followed by one-hidden-layer
//! MLP heads, in the four output layouts (independent, multi-classifier,
//! 1-head joint, 2-head joint).
//!
//! All parameters live in one flat `Vec<f64>` so optimizers, checkpoints and
//! gradient checks treat them uniformly. [`Affine`] records where each
//! weight matrix and bias vector sits in that vector.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::{Architecture, FrameScores, HeadLayout, LabelKind, PseudoLabel};

/// Lower clamp for probabilities inside the loss logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Location of a dense `out x inp` layer (row-major weights, then bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub offset: usize,
    pub out: usize,
    pub inp: usize,
}

impl Affine {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.out * self.inp
    }

    fn bias(&self) -> Range<usize> {
        let start = self.offset + self.out * self.inp;
        start..start + self.out
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.out * (self.inp + 1)
    }

    fn apply(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        let w = &values[self.weights()];
        let b = &values[self.bias()];
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.inp..(o + 1) * self.inp];
            *yo = b[o] + dot(row, x);
        }
    }

    /// Accumulate parameter gradients for upstream `dy` and input `x`;
    /// optionally write the input gradient into `dx`.
    fn backprop(&self, values: &[f64], grad: &mut [f64], x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        let wr = self.weights();
        let br = self.bias();
        {
            let gw = &mut grad[wr.clone()];
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, &xi) in gw[o * self.inp..(o + 1) * self.inp].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for (g, &d) in grad[br].iter_mut().zip(dy) {
            *g += d;
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            let w = &values[wr];
            for (o, &d) in dy.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (dxi, &wi) in dx.iter_mut().zip(&w[o * self.inp..(o + 1) * self.inp]) {
                    *dxi += d * wi;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hidden layer with ReLU followed by a linear output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tower {
    pub hidden: Affine,
    pub output: Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TowerKind {
    State,
    Action,
}

/// One self-contained stack: adapter, state tower and (except for the
/// 1-head joint model) an action tower. Independent models have one block per
/// category, every other architecture a single shared block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub adapter: Affine,
    pub state: Tower,
    pub action: Option<Tower>,
}

impl Block {
    fn tower(&self, kind: TowerKind) -> Option<&Tower> {
        match kind {
            TowerKind::State => Some(&self.state),
            TowerKind::Action => self.action.as_ref(),
        }
    }
}

/// Whether a parameter range belongs to the adapter or to a classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Adapter,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: HeadLayout,
    dim: usize,
    hidden: usize,
    blocks: Vec<Block>,
    values: Vec<f64>,
}

/// How a label's target maps onto a tower's logits.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Softmax { start: usize, len: usize, index: usize },
    Sigmoid { index: usize, positive: bool },
}

struct LayoutBuilder {
    next: usize,
}

impl LayoutBuilder {
    fn affine(&mut self, out: usize, inp: usize) -> Affine {
        let a = Affine { offset: self.next, out, inp };
        self.next += out * (inp + 1);
        a
    }

    fn tower(&mut self, inp: usize, hidden: usize, out: usize) -> Tower {
        let hidden_layer = self.affine(hidden, inp);
        let output = self.affine(out, hidden);
        Tower { hidden: hidden_layer, output }
    }
}

fn build_blocks(layout: &HeadLayout, dim: usize, hidden: usize) -> (Vec<Block>, usize) {
    let n = layout.categories;
    let mut b = LayoutBuilder { next: 0 };
    let block = |b: &mut LayoutBuilder, state_out: usize, action_out: Option<usize>| {
        let adapter = b.affine(dim, dim);
        let state = b.tower(dim, hidden, state_out);
        let action = action_out.map(|o| b.tower(dim, hidden, o));
        Block { adapter, state, action }
    };
    let blocks = match layout.architecture {
        Architecture::Independent => (0..n).map(|_| block(&mut b, layout.state_block(), Some(1))).collect(),
        Architecture::MultiClassifier => vec![block(&mut b, n * layout.state_block(), Some(n))],
        Architecture::Joint1 => vec![block(&mut b, 3 * n, None)],
        Architecture::Joint2 => vec![block(&mut b, layout.state_columns(), Some(n + 1))],
    };
    (blocks, b.next)
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Activations of one tower at one frame.
struct TowerPass {
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
}

impl ModelParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases and an
    /// identity adapter.
    pub fn init(layout: HeadLayout, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if layout.categories == 0 || dim == 0 || hidden == 0 {
            return Err(Error::Config("model dimensions must all be at least 1".into()));
        }
        let (blocks, total) = build_blocks(&layout, dim, hidden);
        let mut values = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &blocks {
            for i in 0..dim {
                values[block.adapter.offset + i * dim + i] = 1.0;
            }
            let towers = std::iter::once(&block.state).chain(block.action.as_ref());
            for tower in towers {
                for layer in [tower.hidden, tower.output] {
                    let bound = 1.0 / (layer.inp as f64).sqrt();
                    for v in &mut values[layer.weights()] {
                        *v = rng.gen_range(-bound..=bound);
                    }
                }
            }
        }
        Ok(ModelParams { layout, dim, hidden, blocks, values })
    }

    /// Rebuild from a flat parameter vector in declaration order.
    pub fn from_values(layout: HeadLayout, dim: usize, hidden: usize, values: Vec<f64>) -> Result<Self> {
        if layout.categories == 0 || dim == 0 || hidden == 0 {
            return Err(Error::Config("model dimensions must all be at least 1".into()));
        }
        let (blocks, total) = build_blocks(&layout, dim, hidden);
        if values.len() != total {
            return Err(Error::Dimension(format!("expected {total} parameters, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(ModelParams { layout, dim, hidden, blocks, values })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn architecture(&self) -> Architecture {
        self.layout.architecture
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    /// Parameter ranges tagged by group, in declaration order.
    pub fn groups(&self) -> Vec<(Range<usize>, ParamGroup)> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push((block.adapter.range(), ParamGroup::Adapter));
            out.push((block.state.hidden.range(), ParamGroup::Head));
            out.push((block.state.output.range(), ParamGroup::Head));
            if let Some(action) = &block.action {
                out.push((action.hidden.range(), ParamGroup::Head));
                out.push((action.output.range(), ParamGroup::Head));
            }
        }
        out
    }

    /// Weight matrix and bias of a layer as views.
    pub fn view(&self, layer: &Affine) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((layer.out, layer.inp), &self.values[layer.weights()]).expect("layer shape");
        let b = ArrayView1::from(&self.values[layer.bias()]);
        (w, b)
    }

    /// Index of the block serving `category`.
    pub fn block_of(&self, category: usize) -> usize {
        match self.layout.architecture {
            Architecture::Independent => category,
            _ => 0,
        }
    }

    fn check_frames(&self, frames: &Array2<f64>) -> Result<()> {
        if frames.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "frames have width {}, model expects {}",
                frames.ncols(),
                self.dim
            )));
        }
        Ok(())
    }

    fn frame<'a>(frames: &'a Array2<f64>, t: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
        let row = frames.row(t);
        match row.to_slice() {
            Some(s) => s,
            None => {
                buf.clear();
                buf.extend(row.iter());
                buf
            }
        }
    }

    /// Adapter output for one frame under `block`.
    pub fn adapt_frame(&self, block: usize, x: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.dim];
        self.blocks[block].adapter.apply(&self.values, x, &mut u);
        u
    }

    /// Adapter outputs for every frame under `block`.
    pub fn adapt(&self, block: usize, frames: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_frames(frames)?;
        let mut out = Array2::zeros((frames.nrows(), self.dim));
        let mut buf = Vec::new();
        for t in 0..frames.nrows() {
            let x = Self::frame(frames, t, &mut buf);
            let u = self.adapt_frame(block, x);
            out.row_mut(t).iter_mut().zip(u).for_each(|(o, v)| *o = v);
        }
        Ok(out)
    }

    fn tower_pass(&self, tower: &Tower, u: &[f64]) -> TowerPass {
        let mut pre = vec![0.0; tower.hidden.out];
        tower.hidden.apply(&self.values, u, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut logits = vec![0.0; tower.output.out];
        tower.output.apply(&self.values, &act, &mut logits);
        TowerPass { pre, act, logits }
    }

    /// Per-frame likelihoods for every category.
    pub fn forward(&self, frames: &Array2<f64>) -> Result<FrameScores> {
        self.check_frames(frames)?;
        let t_len = frames.nrows();
        let layout = self.layout;
        let n = layout.categories;
        let mut state = Array2::zeros((t_len, layout.state_columns()));
        let mut action = Array2::zeros((t_len, layout.action_columns()));
        let mut buf = Vec::new();
        for t in 0..t_len {
            let x = Self::frame(frames, t, &mut buf);
            for (b, block) in self.blocks.iter().enumerate() {
                let u = self.adapt_frame(b, x);
                let mut s = self.tower_pass(&block.state, &u).logits;
                let a = block.action.as_ref().map(|tw| self.tower_pass(tw, &u).logits);
                match layout.architecture {
                    Architecture::Independent | Architecture::MultiClassifier => {
                        let k = layout.state_block();
                        for chunk in s.chunks_mut(k) {
                            softmax_in_place(chunk);
                        }
                        let base = if layout.architecture == Architecture::Independent { b } else { 0 };
                        for (i, p) in s.iter().enumerate() {
                            state[[t, base * k + i]] = *p;
                        }
                        for (i, z) in a.expect("action tower").iter().enumerate() {
                            action[[t, base + i]] = sigmoid(*z);
                        }
                    }
                    Architecture::Joint1 => {
                        softmax_in_place(&mut s);
                        for i in 0..2 * n {
                            state[[t, i]] = s[i];
                        }
                        for c in 0..n {
                            action[[t, c]] = s[2 * n + c];
                        }
                    }
                    Architecture::Joint2 => {
                        softmax_in_place(&mut s);
                        let mut a = a.expect("action tower");
                        softmax_in_place(&mut a);
                        state.row_mut(t).iter_mut().zip(&s).for_each(|(o, v)| *o = *v);
                        action.row_mut(t).iter_mut().zip(&a).for_each(|(o, v)| *o = *v);
                    }
                }
            }
        }
        FrameScores::new(layout, state, action)
    }

    fn target(&self, kind: LabelKind, category: usize) -> Result<(usize, TowerKind, Target)> {
        let layout = self.layout;
        let n = layout.categories;
        if category >= n {
            return Err(Error::CategoryOutOfRange { category, count: n });
        }
        if !layout.supports(kind) {
            return Err(Error::IncompatibleLabel { kind: kind.name(), arch: layout.architecture.name() });
        }
        let k = layout.state_block();
        let block = self.block_of(category);
        Ok(match layout.architecture {
            Architecture::Independent | Architecture::MultiClassifier => {
                let base = if layout.architecture == Architecture::Independent { 0 } else { category };
                match kind {
                    LabelKind::S1 | LabelKind::S2 | LabelKind::BgS => {
                        let index = match kind {
                            LabelKind::S1 => 0,
                            LabelKind::S2 => 1,
                            _ => 2,
                        };
                        (block, TowerKind::State, Target::Softmax { start: base * k, len: k, index })
                    }
                    LabelKind::A => (block, TowerKind::Action, Target::Sigmoid { index: base, positive: true }),
                    LabelKind::BgA => (block, TowerKind::Action, Target::Sigmoid { index: base, positive: false }),
                }
            }
            Architecture::Joint1 => {
                let index = match kind {
                    LabelKind::S1 => 2 * category,
                    LabelKind::S2 => 2 * category + 1,
                    LabelKind::A => 2 * n + category,
                    _ => unreachable!("background labels rejected above"),
                };
                (0, TowerKind::State, Target::Softmax { start: 0, len: 3 * n, index })
            }
            Architecture::Joint2 => {
                let states = layout.state_columns();
                match kind {
                    LabelKind::S1 => (0, TowerKind::State, Target::Softmax { start: 0, len: states, index: 2 * category }),
                    LabelKind::S2 => (0, TowerKind::State, Target::Softmax { start: 0, len: states, index: 2 * category + 1 }),
                    LabelKind::BgS => (0, TowerKind::State, Target::Softmax { start: 0, len: states, index: 2 * n }),
                    LabelKind::A => (0, TowerKind::Action, Target::Softmax { start: 0, len: n + 1, index: category }),
                    LabelKind::BgA => (0, TowerKind::Action, Target::Softmax { start: 0, len: n + 1, index: n }),
                }
            }
        })
    }

    /// Check every label against the architecture and the video length.
    pub fn check_labels(&self, labels: &[PseudoLabel], num_frames: usize) -> Result<()> {
        for label in labels {
            if label.frame >= num_frames {
                return Err(Error::FrameOutOfRange { frame: label.frame, frames: num_frames });
            }
            self.target(label.kind, label.category)?;
        }
        Ok(())
    }

    /// Weighted cross-entropy over labeled frames and its gradient.
    ///
    /// `weights[i]` scales the term of `labels[i]`. Only frames that carry a
    /// label are visited, so unlabeled frames never influence the result.
    pub fn backward(&self, frames: &Array2<f64>, labels: &[PseudoLabel], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.values.len()];
        let loss = self.accumulate(frames, labels, weights, Some(&mut grad))?;
        Ok((loss, grad))
    }

    pub fn loss(&self, frames: &Array2<f64>, labels: &[PseudoLabel], weights: &[f64]) -> Result<f64> {
        self.accumulate(frames, labels, weights, None)
    }

    fn accumulate(
        &self,
        frames: &Array2<f64>,
        labels: &[PseudoLabel],
        weights: &[f64],
        mut grad: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        self.check_frames(frames)?;
        if weights.len() != labels.len() {
            return Err(Error::Dimension(format!("{} weights for {} labels", weights.len(), labels.len())));
        }
        self.check_labels(labels, frames.nrows())?;

        // frame -> block -> tower -> [(target, weight)]
        type Targets = Vec<(Target, f64)>;
        let mut by_frame: BTreeMap<usize, BTreeMap<usize, [Targets; 2]>> = BTreeMap::new();
        for (label, &w) in labels.iter().zip(weights) {
            let (block, tower, target) = self.target(label.kind, label.category)?;
            let slot = by_frame.entry(label.frame).or_default().entry(block).or_default();
            slot[tower as usize].push((target, w));
        }

        let mut loss = 0.0;
        let mut buf = Vec::new();
        let log_floor = PROB_FLOOR.ln();
        for (&t, blocks) in &by_frame {
            let x = Self::frame(frames, t, &mut buf).to_vec();
            for (&b, towers) in blocks {
                let block = &self.blocks[b];
                let u = self.adapt_frame(b, &x);
                let mut du = vec![0.0; self.dim];
                let mut touched = false;
                for kind in [TowerKind::State, TowerKind::Action] {
                    let targets = &towers[kind as usize];
                    if targets.is_empty() {
                        continue;
                    }
                    let tower = block.tower(kind).expect("target maps to an existing tower");
                    let pass = self.tower_pass(tower, &u);
                    let mut dlogits = vec![0.0; pass.logits.len()];
                    for &(target, w) in targets {
                        match target {
                            Target::Softmax { start, len, index } => {
                                let z = &pass.logits[start..start + len];
                                let lse = log_sum_exp(z);
                                let logp = z[index] - lse;
                                if logp > log_floor {
                                    loss -= w * logp;
                                    for (i, d) in dlogits[start..start + len].iter_mut().enumerate() {
                                        let p = (z[i] - lse).exp();
                                        *d += w * (p - if i == index { 1.0 } else { 0.0 });
                                    }
                                } else {
                                    loss -= w * log_floor;
                                }
                            }
                            Target::Sigmoid { index, positive } => {
                                let z = pass.logits[index];
                                let logp = if positive { log_sigmoid(z) } else { log_sigmoid(-z) };
                                if logp > log_floor {
                                    loss -= w * logp;
                                    let y = if positive { 1.0 } else { 0.0 };
                                    dlogits[index] += w * (sigmoid(z) - y);
                                } else {
                                    loss -= w * log_floor;
                                }
                            }
                        }
                    }
                    if let Some(g) = grad.as_deref_mut() {
                        let mut dact = vec![0.0; pass.act.len()];
                        tower.output.backprop(&self.values, g, &pass.act, &dlogits, Some(&mut dact));
                        for (d, &p) in dact.iter_mut().zip(&pass.pre) {
                            if p <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        let mut du_tower = vec![0.0; self.dim];
                        tower.hidden.backprop(&self.values, g, &u, &dact, Some(&mut du_tower));
                        du.iter_mut().zip(&du_tower).for_each(|(a, b)| *a += b);
                        touched = true;
                    }
                }
                if let (Some(g), true) = (grad.as_deref_mut(), touched) {
                    block.adapter.backprop(&self.values, g, &x, &du, None);
                }
            }
        }
        Ok(loss)
    }
}
