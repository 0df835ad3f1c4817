//! Synthetic videos with planted state/action blocks.
//!
//! Every category owns four prototype vectors (initial state, action, end
//! state, background). A relevant video is background everywhere except for
//! three ordered blocks `s1 < action < s2`; each frame is its prototype plus
//! isotropic Gaussian noise. Distractor videos carry a category label but only
//! show another category's background.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    AnnotationTrack, Architecture, Category, CategoryCatalog, FrameScores, HeadLayout, Interval, Role, VideoFeatures,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub categories: usize,
    pub videos_per_category: usize,
    /// Distractor videos; `None` means 10% of the relevant videos.
    pub noise_videos: Option<usize>,
    pub frames: usize,
    pub dim: usize,
    pub fps: f64,
    /// Minimum pairwise distance between distinct prototypes.
    pub prototype_separation: f64,
    /// Per-coordinate noise; `None` means `prototype_separation / 6`.
    pub feature_noise_sigma: Option<f64>,
    /// Inclusive `(min, max)` block lengths in frames.
    pub s1_len: (usize, usize),
    pub action_len: (usize, usize),
    pub s2_len: (usize, usize),
    pub gap_len: (usize, usize),
    /// Category pairs that share one action prototype.
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Fraction of each category's relevant videos held out for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            categories: 5,
            videos_per_category: 40,
            noise_videos: None,
            frames: 120,
            dim: 32,
            fps: 1.0,
            prototype_separation: 1.0,
            feature_noise_sigma: None,
            s1_len: (8, 16),
            action_len: (6, 12),
            s2_len: (8, 16),
            gap_len: (3, 10),
            confusable_pairs: vec![(0, 1)],
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn sigma(&self) -> f64 {
        self.feature_noise_sigma.unwrap_or(self.prototype_separation / 6.0)
    }

    pub fn num_noise_videos(&self) -> usize {
        self.noise_videos
            .unwrap_or_else(|| (self.categories * self.videos_per_category + 5) / 10)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories == 0 || self.dim == 0 {
            return Err(Error::Config("categories and dim must be at least 1".into()));
        }
        if !(self.prototype_separation > 0.0) || !(self.sigma() >= 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config("separation and fps must be positive, sigma nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        for (lo, hi) in [self.s1_len, self.action_len, self.s2_len, self.gap_len] {
            if lo == 0 || lo > hi {
                return Err(Error::Layout(format!("block length range ({lo}, {hi}) must satisfy 1 <= min <= max")));
            }
        }
        let min_total = self.s1_len.0 + self.action_len.0 + self.s2_len.0 + 2 * self.gap_len.0;
        if min_total > self.frames {
            return Err(Error::Layout(format!(
                "blocks need at least {min_total} frames but videos have {}",
                self.frames
            )));
        }
        for &(a, b) in &self.confusable_pairs {
            if a >= self.categories || b >= self.categories || a == b {
                return Err(Error::Config(format!("invalid confusable pair ({a}, {b})")));
            }
        }
        Ok(())
    }
}

/// Which prototype a category uses for each phase; phases index into `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub vectors: Vec<Vec<f64>>,
    /// `[s1, action, s2, background]` indices per category.
    pub phases: Vec<[usize; 4]>,
}

pub const PHASE_BACKGROUND: usize = 3;

impl Prototypes {
    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = cfg.categories;
        let mut shared_action: Vec<Option<usize>> = vec![None; n];
        for &(a, b) in &cfg.confusable_pairs {
            let (lo, hi) = (a.min(b), a.max(b));
            let root = shared_action[lo].unwrap_or(lo);
            shared_action[hi] = Some(root);
        }
        let mut vectors: Vec<Vec<f64>> = Vec::new();
        let mut phases = vec![[0usize; 4]; n];
        for c in 0..n {
            for phase in 0..4 {
                let reuse = match phase {
                    1 => shared_action[c].map(|root| phases[root][1]),
                    _ => None,
                };
                phases[c][phase] = match reuse {
                    Some(index) => index,
                    None => {
                        vectors.push((0..cfg.dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect());
                        vectors.len() - 1
                    }
                };
            }
        }
        // rescale so the closest pair sits exactly at the requested separation
        let min_dist = min_pairwise_distance(&vectors);
        if min_dist > 0.0 && min_dist.is_finite() {
            let scale = cfg.prototype_separation / min_dist;
            for v in &mut vectors {
                v.iter_mut().for_each(|x| *x *= scale);
            }
        }
        Prototypes { vectors, phases }
    }

    pub fn vector(&self, category: usize, phase: usize) -> &[f64] {
        &self.vectors[self.phases[category][phase]]
    }

    /// Index of the nearest prototype vector to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, v) in self.vectors.iter().enumerate() {
            let d = squared_distance(v, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Scores of an idealized classifier that knows the prototypes: posterior
    /// of each prototype under isotropic Gaussians of width `sigma`
    /// (a softmax over negative scaled squared distances).
    pub fn ideal_scores(&self, frames: &Array2<f64>, sigma: f64) -> FrameScores {
        let n = self.phases.len();
        let t_len = frames.nrows();
        let layout = HeadLayout::new(Architecture::Joint2, n, true);
        let mut state = Array2::zeros((t_len, 2 * n + 1));
        let mut action = Array2::zeros((t_len, n + 1));
        let temp = 2.0 * sigma.max(1e-6).powi(2);
        for t in 0..t_len {
            let x: Vec<f64> = frames.row(t).to_vec();
            let logits: Vec<f64> = self.vectors.iter().map(|v| -squared_distance(v, &x) / temp).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            let post: Vec<f64> = exp.iter().map(|e| e / sum).collect();
            let mut bg = 0.0;
            for c in 0..n {
                let [s1, a, s2, b] = self.phases[c];
                state[[t, 2 * c]] = post[s1];
                state[[t, 2 * c + 1]] = post[s2];
                action[[t, c]] = post[a];
                bg += post[b];
            }
            state[[t, 2 * n]] = bg;
            action[[t, n]] = bg;
        }
        FrameScores::new(layout, state, action).expect("layout matches construction")
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn min_pairwise_distance(vectors: &[Vec<f64>]) -> f64 {
    let mut min = f64::INFINITY;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            min = min.min(squared_distance(&vectors[i], &vectors[j]).sqrt());
        }
    }
    min
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Planted block boundaries of a relevant video (inclusive frame ranges).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedBlocks {
    pub s1: (usize, usize),
    pub action: (usize, usize),
    pub s2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub features: VideoFeatures,
    pub split: Split,
    /// `None` for distractor videos.
    pub blocks: Option<PlantedBlocks>,
    /// Category whose prototypes actually appear in the video.
    pub source_category: usize,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub catalog: CategoryCatalog,
    pub videos: Vec<SynthVideo>,
    pub annotations: Vec<AnnotationTrack>,
    pub prototypes: Prototypes,
    pub sigma: f64,
}

impl SynthDataset {
    pub fn features(&self) -> Vec<VideoFeatures> {
        self.videos.iter().map(|v| v.features.clone()).collect()
    }

    pub fn split(&self, split: Split) -> Vec<VideoFeatures> {
        self.videos.iter().filter(|v| v.split == split).map(|v| v.features.clone()).collect()
    }
}

fn sample_lengths(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> [usize; 5] {
    let ranges = [cfg.s1_len, cfg.gap_len, cfg.action_len, cfg.gap_len, cfg.s2_len];
    let mut lens = ranges.map(|(lo, hi)| rng.gen_range(lo..=hi));
    // shrink the longest shrinkable part until the layout fits
    while lens.iter().sum::<usize>() > cfg.frames {
        let (i, _) = lens
            .iter()
            .enumerate()
            .filter(|(i, l)| **l > ranges[*i].0)
            .max_by_key(|(i, l)| (**l - ranges[*i].0, usize::MAX - i))
            .expect("validated minimum layout fits");
        lens[i] -= 1;
    }
    lens
}

fn category_names(n: usize) -> CategoryCatalog {
    let cats = (0..n)
        .map(|c| Category::new(&format!("task{c}"), &format!("task{c}_initial"), &format!("task{c}_end"), &format!("task{c}_action")))
        .collect();
    CategoryCatalog::new(cats).expect("generated names are unique")
}

/// Prototype of each frame plus isotropic noise, sampled row-major.
fn fill<'p>(rng: &mut ChaCha8Rng, frames: usize, dim: usize, noise: &Normal<f64>, phase_of: impl Fn(usize) -> &'p [f64]) -> Array2<f64> {
    let mut out = Array2::zeros((frames, dim));
    for t in 0..frames {
        let proto = phase_of(t);
        for (d, v) in out.row_mut(t).iter_mut().enumerate() {
            let eps = if noise.std_dev() > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = proto[d] + eps;
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = Prototypes::generate(cfg, &mut rng);
    let sigma = cfg.sigma();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.categories;
    let t_len = cfg.frames;
    let heldout = (cfg.videos_per_category as f64 * cfg.heldout_fraction).round() as usize;

    let mut videos = Vec::new();
    let mut annotations = Vec::new();
    for c in 0..n {
        for i in 0..cfg.videos_per_category {
            let [l_s1, g1, l_a, g2, l_s2] = sample_lengths(cfg, &mut rng);
            let total = l_s1 + g1 + l_a + g2 + l_s2;
            let lead = rng.gen_range(0..=t_len - total);
            let s1 = (lead, lead + l_s1 - 1);
            let action = (s1.1 + g1 + 1, s1.1 + g1 + l_a);
            let s2 = (action.1 + g2 + 1, action.1 + g2 + l_s2);
            let phase = |t: usize| {
                let p = if t >= s1.0 && t <= s1.1 {
                    0
                } else if t >= action.0 && t <= action.1 {
                    1
                } else if t >= s2.0 && t <= s2.1 {
                    2
                } else {
                    PHASE_BACKGROUND
                };
                prototypes.vector(c, p)
            };
            let frames = fill(&mut rng, t_len, cfg.dim, &noise, phase);
            let id = format!("task{c}_{i:03}");
            annotations.push(AnnotationTrack {
                video_id: id.clone(),
                intervals: vec![
                    Interval { kind: Role::Initial, start: s1.0, end: s1.1 },
                    Interval { kind: Role::Action, start: action.0, end: action.1 },
                    Interval { kind: Role::End, start: s2.0, end: s2.1 },
                ],
            });
            let split = if i >= cfg.videos_per_category - heldout { Split::Test } else { Split::Train };
            videos.push(SynthVideo {
                features: VideoFeatures::new(id, c, cfg.fps, frames),
                split,
                blocks: Some(PlantedBlocks { s1, action, s2 }),
                source_category: c,
            });
        }
    }

    for i in 0..cfg.num_noise_videos() {
        let source = i % n;
        // label points away from the content: a confusable partner if any, else the next category
        let label = cfg
            .confusable_pairs
            .iter()
            .find_map(|&(a, b)| if a == source { Some(b) } else if b == source { Some(a) } else { None })
            .unwrap_or((source + 1) % n);
        let label = if n == 1 { 0 } else { label };
        let frames = fill(&mut rng, t_len, cfg.dim, &noise, |_| prototypes.vector(source, PHASE_BACKGROUND));
        videos.push(SynthVideo {
            features: VideoFeatures::new(format!("noise_{i:03}"), label, cfg.fps, frames),
            split: Split::Train,
            blocks: None,
            source_category: source,
        });
    }

    Ok(SynthDataset { catalog: category_names(n), videos, annotations, prototypes, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_dataset;

    fn small() -> SynthConfig {
        SynthConfig { categories: 3, videos_per_category: 5, frames: 60, dim: 8, seed: 4, ..Default::default() }
    }

    #[test]
    fn noiseless_blocks_equal_prototypes() {
        let cfg = SynthConfig { feature_noise_sigma: Some(0.0), ..small() };
        let data = generate(&cfg).unwrap();
        for v in data.videos.iter().filter(|v| v.blocks.is_some()) {
            let b = v.blocks.unwrap();
            let c = v.features.label;
            for (phase, (lo, hi)) in [(0, b.s1), (1, b.action), (2, b.s2)] {
                for t in lo..=hi {
                    assert_eq!(v.features.frames.row(t).to_vec(), data.prototypes.vector(c, phase));
                }
            }
        }
    }

    #[test]
    fn default_counts_and_validity() {
        let data = generate(&SynthConfig::default()).unwrap();
        let relevant = data.videos.iter().filter(|v| v.blocks.is_some()).count();
        assert_eq!(relevant, 200);
        assert_eq!(data.videos.len(), 220);
        assert!(validate_dataset(&data.catalog, &data.features()).all_ok());
        assert_eq!(data.annotations.len(), 200);
        assert_eq!(data.split(Split::Test).len(), 40);
    }

    #[test]
    fn blocks_are_ordered_and_inside() {
        let data = generate(&SynthConfig::default()).unwrap();
        for v in &data.videos {
            if let Some(b) = v.blocks {
                assert!(b.s1.0 <= b.s1.1 && b.s1.1 + 1 < b.action.0);
                assert!(b.action.1 + 1 < b.s2.0 && b.s2.1 < v.features.num_frames());
            }
        }
    }

    #[test]
    fn separation_and_sharing() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        let min = min_pairwise_distance(&data.prototypes.vectors);
        assert!((min - cfg.prototype_separation).abs() < 1e-9);
        assert_eq!(data.prototypes.phases[0][1], data.prototypes.phases[1][1]);
        assert_eq!(data.prototypes.vectors.len(), 4 * 5 - 1);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.features(), b.features());
        let c = generate(&SynthConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn infeasible_layout_rejected() {
        let cfg = SynthConfig { frames: 20, ..small() };
        assert!(matches!(generate(&cfg), Err(Error::Layout(_))));
    }

    #[test]
    fn nearest_prototype_recovers_noiseless_phases() {
        let cfg = SynthConfig { feature_noise_sigma: Some(0.0), ..small() };
        let data = generate(&cfg).unwrap();
        for v in data.videos.iter().filter(|v| v.blocks.is_some()) {
            let b = v.blocks.unwrap();
            let c = v.features.label;
            for (phase, (lo, hi)) in [(0, b.s1), (1, b.action), (2, b.s2)] {
                for t in lo..=hi {
                    let x = v.features.frames.row(t).to_vec();
                    assert_eq!(data.prototypes.nearest(&x), data.prototypes.phases[c][phase]);
                }
            }
        }
    }
}
