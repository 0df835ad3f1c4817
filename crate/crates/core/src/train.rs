//! Self-training loop: decode every batch video under its noisy label, turn
//! the decodes into pseudo labels, then take one gradient step using only the
//! labeled frames.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{localize, DecodeOptions};
use crate::error::{Error, Result};
use crate::evalkit::{precision_at_1, Prediction, PrecisionReport};
use crate::model::{ModelParams, ParamGroup};
use crate::parallel::Workers;
use crate::pseudo::{anchor_distance, build_cross_task_negatives, build_labels, BatchVideo, LabelRuleConfig};
use crate::types::{AnnotationTrack, Head, LabelKind, Localization, PseudoLabel, VideoFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    MomentumSgd,
    PlainGd,
}

/// Per-(video, label kind) loss weight, evaluated once per batch.
pub trait WeightHook: Send + Sync + fmt::Debug {
    /// `batch_scores[i]` is `p(l|v)` of batch video `i` under its label.
    fn weight(&self, batch_scores: &[f64], video: usize, kind: LabelKind) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantWeight(pub f64);

impl WeightHook for ConstantWeight {
    fn weight(&self, _: &[f64], _: usize, _: LabelKind) -> f64 {
        self.0
    }
}

/// Rank of a video's decode score within its batch, scaled to `(0, 1]`:
/// the most confident video gets 1, the least confident `1 / B`.
#[derive(Debug, Clone, Copy)]
pub struct BatchRankWeight;

impl WeightHook for BatchRankWeight {
    fn weight(&self, batch_scores: &[f64], video: usize, _: LabelKind) -> f64 {
        let mine = batch_scores[video];
        let below = batch_scores
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s < mine || (s == mine && i < video))
            .count();
        (below + 1) as f64 / batch_scores.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_videos: usize,
    pub base_lr_heads: f64,
    pub base_lr_adapter: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub l2_penalty_heads: f64,
    /// Multiplier on action-head terms (`A` and `BG_A`).
    pub action_loss_scale: f64,
    pub optimizer: OptimizerMode,
    pub weight_hook: Arc<dyn WeightHook>,
    pub max_labeled_frames_per_video: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_videos: 8,
            base_lr_heads: 1e-4,
            base_lr_adapter: 1e-5,
            warmup_epochs: 5,
            momentum: 0.9,
            l2_penalty_heads: 1e-3,
            action_loss_scale: 0.2,
            optimizer: OptimizerMode::MomentumSgd,
            weight_hook: Arc::new(ConstantWeight(1.0)),
            max_labeled_frames_per_video: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr_heads > 0.0) || !(self.action_loss_scale > 0.0) {
            return Err(Error::Config("head learning rate and the action loss scale must be positive".into()));
        }
        // zero freezes the adapter
        if !(self.base_lr_adapter >= 0.0) {
            return Err(Error::Config("adapter learning rate must be nonnegative".into()));
        }
        if self.batch_videos == 0 || self.max_labeled_frames_per_video == 0 {
            return Err(Error::Config("batch size and label cap must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.l2_penalty_heads < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and the L2 penalty be nonnegative".into()));
        }
        Ok(())
    }
}

/// Learning rates `(heads, adapter)` at `step` of `total_steps`: a linear ramp
/// from zero over the warmup, then a half-cosine decay to zero at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> (f64, f64) {
    let warmup = if cfg.epochs == 0 {
        0
    } else {
        ((total_steps * cfg.warmup_epochs.min(cfg.epochs)) as f64 / cfg.epochs as f64).round() as usize
    };
    let factor = if step < warmup {
        step as f64 / warmup as f64
    } else {
        let span = total_steps.saturating_sub(1).saturating_sub(warmup);
        if span == 0 {
            1.0
        } else {
            let progress = (step - warmup) as f64 / span as f64;
            0.5 * (1.0 + (PI * progress.min(1.0)).cos())
        }
    };
    (cfg.base_lr_heads * factor, cfg.base_lr_adapter * factor)
}

/// SGD with optional momentum and L2 decay on head parameters only.
#[derive(Debug, Clone)]
pub struct Optimizer {
    mode: OptimizerMode,
    momentum: f64,
    l2: f64,
    groups: Vec<(Range<usize>, ParamGroup)>,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Optimizer {
            mode: cfg.optimizer,
            momentum: cfg.momentum,
            l2: cfg.l2_penalty_heads,
            groups: params.groups(),
            velocity: vec![0.0; params.num_params()],
        }
    }

    pub fn step(&mut self, values: &mut [f64], grad: &[f64], lr_heads: f64, lr_adapter: f64) {
        for (range, group) in &self.groups {
            let (lr, decay) = match group {
                ParamGroup::Head => (lr_heads, self.l2),
                ParamGroup::Adapter => (lr_adapter, 0.0),
            };
            for i in range.clone() {
                let d = grad[i] + decay * values[i];
                match self.mode {
                    OptimizerMode::MomentumSgd => {
                        self.velocity[i] = self.momentum * self.velocity[i] + d;
                        values[i] -= lr * self.velocity[i];
                    }
                    OptimizerMode::PlainGd => values[i] -= lr * d,
                }
            }
        }
    }
}

/// Labels and loss weights mined for one batch video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabels {
    pub localization: Localization,
    pub labels: Vec<PseudoLabel>,
    pub weights: Vec<f64>,
    pub labeled_frames: usize,
    pub num_frames: usize,
}

/// Keep at most `cap` distinct frames: frames carrying a positive first, then
/// negative-only frames, each ordered by distance to the anchor that produced
/// them. Labels for other categories (cross-task negatives) come last.
pub fn truncate_labels(labels: Vec<PseudoLabel>, loc: &Localization, cap: usize) -> Vec<PseudoLabel> {
    let mut frames: BTreeMap<usize, (bool, usize)> = BTreeMap::new();
    for label in &labels {
        let distance = if label.category == loc.category { anchor_distance(label, loc) } else { usize::MAX };
        let entry = frames.entry(label.frame).or_insert((false, usize::MAX));
        if label.kind.is_positive() {
            if !entry.0 {
                *entry = (true, distance);
            } else {
                entry.1 = entry.1.min(distance);
            }
        } else if !entry.0 {
            entry.1 = entry.1.min(distance);
        }
    }
    if frames.len() <= cap {
        return labels;
    }
    let mut ranked: Vec<(bool, usize, usize)> = frames.into_iter().map(|(f, (pos, d))| (!pos, d, f)).collect();
    ranked.sort();
    let keep: std::collections::BTreeSet<usize> = ranked.into_iter().take(cap).map(|(_, _, f)| f).collect();
    labels.into_iter().filter(|l| keep.contains(&l.frame)).collect()
}

fn step_seed(base: u64, step: usize) -> u64 {
    base ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stage 1: decode each video under its label and build its labels, without
/// any gradient computation.
pub fn mine_batch(
    params: &ModelParams,
    batch: &[&VideoFeatures],
    cfg: &TrainConfig,
    rules: &LabelRuleConfig,
    opts: &DecodeOptions,
    workers: &Workers,
    step: usize,
) -> Result<Vec<VideoLabels>> {
    let layout = params.layout();
    let decoded: Vec<Result<(Localization, Vec<PseudoLabel>)>> = workers.map(batch, |video| {
        let scores = params.forward(&video.frames)?;
        let loc = localize(&scores, video.label, opts)?;
        let labels = build_labels(video, &loc, rules, &layout)?;
        Ok((loc, labels))
    });
    let decoded: Vec<(Localization, Vec<PseudoLabel>)> = decoded.into_iter().collect::<Result<_>>()?;

    let refs: Vec<BatchVideo<'_>> = batch
        .iter()
        .zip(&decoded)
        .map(|(v, (_, labels))| BatchVideo {
            id: &v.id,
            num_frames: v.num_frames(),
            label: v.label,
            positives: labels.iter().filter(|l| l.kind.is_positive()).count(),
        })
        .collect();
    let step_rules = LabelRuleConfig { seed: step_seed(rules.seed, step), ..rules.clone() };
    let cross = build_cross_task_negatives(&refs, &step_rules, &layout);

    let mut per_video: Vec<(Localization, Vec<PseudoLabel>)> = decoded;
    for label in cross {
        let host = batch.iter().position(|v| v.id == label.video_id).expect("negative sourced from batch");
        per_video[host].1.push(label);
    }

    let batch_scores: Vec<f64> = per_video.iter().map(|(loc, _)| loc.score).collect();
    let mut out = Vec::with_capacity(batch.len());
    for (i, ((loc, labels), video)) in per_video.into_iter().zip(batch).enumerate() {
        let labels = truncate_labels(labels, &loc, cfg.max_labeled_frames_per_video);
        let weights = labels
            .iter()
            .map(|l| {
                let head_scale = if l.kind.head() == Head::Action { cfg.action_loss_scale } else { 1.0 };
                l.weight * head_scale * cfg.weight_hook.weight(&batch_scores, i, l.kind)
            })
            .collect();
        let labeled_frames = labels.iter().map(|l| l.frame).collect::<std::collections::BTreeSet<_>>().len();
        out.push(VideoLabels { localization: loc, labels, weights, labeled_frames, num_frames: video.num_frames() });
    }
    Ok(out)
}

/// Summed loss and gradient over the batch, reduced in video order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&VideoFeatures],
    mined: &[VideoLabels],
    workers: &Workers,
) -> Result<(f64, Vec<f64>)> {
    let items: Vec<(&VideoFeatures, &VideoLabels)> = batch.iter().copied().zip(mined).collect();
    let parts = workers.map(&items, |(video, vl)| params.backward(&video.frames, &vl.labels, &vl.weights));
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.num_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Summed loss over the batch at the current parameters.
pub fn batch_loss(params: &ModelParams, batch: &[&VideoFeatures], mined: &[VideoLabels]) -> Result<f64> {
    let mut loss = 0.0;
    for (video, vl) in batch.iter().zip(mined) {
        loss += params.loss(&video.frames, &vl.labels, &vl.weights)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub label_counts: BTreeMap<String, usize>,
    /// Mean over batch videos of labeled frames / total frames.
    pub labeled_frame_fraction: f64,
    pub max_labeled_frame_fraction: f64,
    pub max_labeled_frames: usize,
    pub lr_heads: f64,
    pub lr_adapter: f64,
    pub updated: bool,
}

/// Parameters plus optimizer state and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Optimizer,
    pub step: usize,
    pub total_steps: usize,
}

impl TrainState {
    pub fn new(params: ModelParams, cfg: &TrainConfig, total_steps: usize) -> Self {
        let optimizer = Optimizer::new(&params, cfg);
        TrainState { params, optimizer, step: 0, total_steps }
    }
}

fn count_labels(mined: &[VideoLabels]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = LabelKind::ALL.iter().map(|k| (k.name().to_string(), 0)).collect();
    for vl in mined {
        for l in &vl.labels {
            *counts.get_mut(l.kind.name()).expect("all kinds present") += 1;
        }
    }
    counts
}

/// Stage 2: one optimizer step on already mined labels.
pub fn apply_update(
    state: &mut TrainState,
    batch: &[&VideoFeatures],
    mined: &[VideoLabels],
    cfg: &TrainConfig,
    workers: &Workers,
) -> Result<(f64, bool, (f64, f64))> {
    let lrs = lr_at(state.step.min(state.total_steps.saturating_sub(1)), state.total_steps.max(1), cfg);
    let any_weight = mined.iter().any(|vl| vl.weights.iter().any(|w| *w > 0.0));
    if !any_weight {
        return Ok((0.0, false, lrs));
    }
    let (loss, grad) = batch_gradient(&state.params, batch, mined, workers)?;
    state.optimizer.step(state.params.values_mut(), &grad, lrs.0, lrs.1);
    Ok((loss, true, lrs))
}

/// One iteration: mine labels on the whole batch, then update on labeled frames.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&VideoFeatures],
    cfg: &TrainConfig,
    rules: &LabelRuleConfig,
    opts: &DecodeOptions,
    workers: &Workers,
) -> Result<StepReport> {
    train_step_mined(state, batch, cfg, rules, opts, workers).map(|(report, _)| report)
}

/// [`train_step`] that also hands back the mined labels.
pub fn train_step_mined(
    state: &mut TrainState,
    batch: &[&VideoFeatures],
    cfg: &TrainConfig,
    rules: &LabelRuleConfig,
    opts: &DecodeOptions,
    workers: &Workers,
) -> Result<(StepReport, Vec<VideoLabels>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mined = mine_batch(&state.params, batch, cfg, rules, opts, workers, state.step)?;
    let (loss, updated, (lr_heads, lr_adapter)) = apply_update(state, batch, &mined, cfg, workers)?;
    let fractions: Vec<f64> = mined.iter().map(|vl| vl.labeled_frames as f64 / vl.num_frames as f64).collect();
    let report = StepReport {
        step: state.step,
        loss,
        label_counts: count_labels(&mined),
        labeled_frame_fraction: fractions.iter().sum::<f64>() / fractions.len() as f64,
        max_labeled_frame_fraction: fractions.iter().copied().fold(0.0, f64::max),
        max_labeled_frames: mined.iter().map(|vl| vl.labeled_frames).max().unwrap_or(0),
        lr_heads,
        lr_adapter,
        updated,
    };
    state.step += 1;
    Ok((report, mined))
}

/// Decode `videos` under their labels and score them against `annotations`;
/// videos without an annotation track are skipped.
pub fn evaluate_precision(
    params: &ModelParams,
    videos: &[VideoFeatures],
    annotations: &[AnnotationTrack],
    opts: &DecodeOptions,
    workers: &Workers,
) -> Result<PrecisionReport> {
    let annotated: Vec<&VideoFeatures> =
        videos.iter().filter(|v| annotations.iter().any(|a| a.video_id == v.id)).collect();
    let preds: Vec<Result<Prediction>> = workers.map(&annotated, |v| {
        let scores = params.forward(&v.frames)?;
        Ok(Prediction { video_id: v.id.clone(), loc: localize(&scores, v.label, opts)? })
    });
    let preds: Vec<Prediction> = preds.into_iter().collect::<Result<_>>()?;
    precision_at_1(&preds, annotations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub label_counts: BTreeMap<String, usize>,
    pub heldout_state_precision: Option<f64>,
    pub heldout_action_precision: Option<f64>,
    pub lr: f64,
    pub max_labeled_frame_fraction: f64,
}

pub struct HeldOut<'a> {
    pub videos: &'a [VideoFeatures],
    pub annotations: &'a [AnnotationTrack],
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best held-out epoch's parameters, or the final ones without a held-out split.
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
}

pub fn fit(
    params: ModelParams,
    train: &[VideoFeatures],
    heldout: Option<HeldOut<'_>>,
    cfg: &TrainConfig,
    rules: &LabelRuleConfig,
    opts: &DecodeOptions,
    workers: &Workers,
) -> Result<FitOutcome> {
    fit_observed(params, train, heldout, cfg, rules, opts, workers, &mut |_, _| Ok(()))
}

/// Called after every step with its report and mined labels.
pub type StepObserver<'o> = dyn FnMut(&StepReport, &[VideoLabels]) -> Result<()> + 'o;

/// [`fit`] with a callback after every training step.
#[allow(clippy::too_many_arguments)]
pub fn fit_observed(
    params: ModelParams,
    train: &[VideoFeatures],
    heldout: Option<HeldOut<'_>>,
    cfg: &TrainConfig,
    rules: &LabelRuleConfig,
    opts: &DecodeOptions,
    workers: &Workers,
    observer: &mut StepObserver<'_>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    rules.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_videos);
    let mut state = TrainState::new(params, cfg, steps_per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut lr = 0.0;
        let mut max_fraction: f64 = 0.0;
        for chunk in order.chunks(cfg.batch_videos) {
            let batch: Vec<&VideoFeatures> = chunk.iter().map(|&i| &train[i]).collect();
            let (report, mined) = train_step_mined(&mut state, &batch, cfg, rules, opts, workers)?;
            observer(&report, &mined)?;
            losses.push(report.loss);
            for (k, v) in report.label_counts {
                *counts.entry(k).or_default() += v;
            }
            lr = report.lr_heads;
            max_fraction = max_fraction.max(report.max_labeled_frame_fraction);
        }
        let (hs, ha) = match &heldout {
            Some(h) => {
                let report = evaluate_precision(&state.params, h.videos, h.annotations, opts, workers)?;
                let total = report.state_precision + report.action_precision;
                if best.as_ref().map_or(true, |(b, _, _)| total > *b) {
                    best = Some((total, epoch, state.params.clone()));
                }
                (Some(report.state_precision), Some(report.action_precision))
            }
            None => (None, None),
        };
        log.push(EpochLog {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            label_counts: counts,
            heldout_state_precision: hs,
            heldout_action_precision: ha,
            lr,
            max_labeled_frame_fraction: max_fraction,
        });
    }
    let final_params = state.params;
    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (final_params.clone(), None),
    };
    Ok(FitOutcome { params, final_params, best_epoch, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Architecture, HeadLayout};

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { epochs: 10, warmup_epochs: 2, base_lr_heads: 1e-3, base_lr_adapter: 1e-4, ..Default::default() };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg), (0.0, 0.0));
        assert_eq!(lr_at(20, total, &cfg), (1e-3, 1e-4));
        let (h, a) = lr_at(99, total, &cfg);
        assert!(h.abs() < 1e-9 && a.abs() < 1e-9);
        let (h10, _) = lr_at(10, total, &cfg);
        assert!((h10 - 0.5e-3).abs() < 1e-15);
        // closed form midway through the decay
        let (h, _) = lr_at(59, total, &cfg);
        let expected = 1e-3 * 0.5 * (1.0 + (PI * 39.0 / 79.0).cos());
        assert!((h - expected).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = TrainConfig::default();
        let total = 500;
        let lrs: Vec<f64> = (0..total).map(|s| lr_at(s, total, &cfg).0).collect();
        let warm = 50;
        assert!(lrs[..=warm].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[warm..].windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_weight_in_unit_interval() {
        let scores = [0.3, 0.9, 0.1, 0.3];
        let w: Vec<f64> = (0..4).map(|i| BatchRankWeight.weight(&scores, i, LabelKind::A)).collect();
        assert_eq!(w, vec![0.5, 1.0, 0.25, 0.75]);
    }

    #[test]
    fn truncation_keeps_positives_first() {
        let loc = Localization { s1_frame: 10, action_frame: 50, s2_frame: 90, score: 1.0, category: 0 };
        let mk = |frame, kind| PseudoLabel { video_id: "v".into(), frame, category: 0, kind, weight: 1.0 };
        let labels = vec![mk(10, LabelKind::S1), mk(11, LabelKind::S1), mk(50, LabelKind::A), mk(112, LabelKind::BgA), mk(110, LabelKind::BgA)];
        let kept = truncate_labels(labels, &loc, 4);
        let frames: Vec<usize> = kept.iter().map(|l| l.frame).collect();
        assert_eq!(frames, vec![10, 11, 50, 110]);
    }

    #[test]
    fn optimizer_decay_only_on_heads() {
        let params = ModelParams::init(HeadLayout::new(Architecture::Joint2, 2, true), 3, 4, 0).unwrap();
        let cfg = TrainConfig { optimizer: OptimizerMode::PlainGd, l2_penalty_heads: 0.5, ..Default::default() };
        let mut opt = Optimizer::new(&params, &cfg);
        let mut values = params.values().to_vec();
        let zero = vec![0.0; values.len()];
        opt.step(&mut values, &zero, 0.1, 0.1);
        for (range, group) in params.groups() {
            for i in range {
                match group {
                    ParamGroup::Adapter => assert_eq!(values[i], params.values()[i]),
                    ParamGroup::Head => assert!((values[i] - params.values()[i] * 0.95).abs() < 1e-15),
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { base_lr_adapter: 0.0, ..Default::default() }.validate().is_ok());
        assert!(TrainConfig { base_lr_adapter: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { action_loss_scale: 0.0, ..Default::default() }.validate().is_err());
    }
}
