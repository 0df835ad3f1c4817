//! Pseudo-label construction from decoded localizations.
//!
//! Rules:
//! - A: positives within `delta` of each decoded frame (S1, A, S2).
//! - B: action background at distance `[delta', delta' + delta]` from the action.
//! - C: action background within `delta` of either decoded state.
//! - D: state background within `delta` of the decoded action.
//! - E: frames of other-category videos in the batch as explicit negatives
//!   (multi-classifier only; joint softmax heads get them implicitly).
//!
//! Each head holds at most one label per frame. A positive displaces a
//! negative; two competing state positives keep the one with the nearer
//! anchor, S1 on ties.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{seconds_to_frames, Architecture, Head, HeadLayout, LabelKind, Localization, PseudoLabel, Role, VideoFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub d: bool,
    pub e: bool,
}

impl RuleSet {
    pub const ALL: RuleSet = RuleSet { a: true, b: true, c: true, d: true, e: true };
    /// Positives plus action background negatives only.
    pub const SINGLE_TASK: RuleSet = RuleSet { a: true, b: true, c: false, d: false, e: false };

    /// Head layout for `arch`; the state head gets a background class exactly
    /// when rule D can emit state negatives.
    pub fn layout(&self, arch: Architecture, categories: usize) -> HeadLayout {
        HeadLayout::new(arch, categories, self.d)
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::ALL
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.a, "A"), (self.b, "B"), (self.c, "C"), (self.d, "D"), (self.e, "E")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for RuleSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut rules = RuleSet { a: false, b: false, c: false, d: false, e: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "A" | "a" => rules.a = true,
                "B" | "b" => rules.b = true,
                "C" | "c" => rules.c = true,
                "D" | "d" => rules.d = true,
                "E" | "e" => rules.e = true,
                other => return Err(Error::Config(format!("unknown rule {other:?}; expected a subset of A,B,C,D,E"))),
            }
        }
        Ok(rules)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRuleConfig {
    pub delta_seconds: f64,
    pub delta_prime_seconds: f64,
    pub rules: RuleSet,
    /// Rule-E negatives per video; `None` matches the video's rule-A positive count.
    pub explicit_negatives_per_video: Option<usize>,
    pub seed: u64,
}

impl Default for LabelRuleConfig {
    fn default() -> Self {
        LabelRuleConfig {
            delta_seconds: 2.0,
            delta_prime_seconds: 60.0,
            rules: RuleSet::ALL,
            explicit_negatives_per_video: None,
            seed: 0,
        }
    }
}

impl LabelRuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_seconds > 0.0) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta_seconds)));
        }
        if !(self.delta_prime_seconds > self.delta_seconds) {
            return Err(Error::Config(format!(
                "delta' ({}) must exceed delta ({})",
                self.delta_prime_seconds, self.delta_seconds
            )));
        }
        Ok(())
    }

    /// `(delta, delta')` in frames at `fps`.
    pub fn windows(&self, fps: f64) -> (usize, usize) {
        (seconds_to_frames(self.delta_seconds, fps), seconds_to_frames(self.delta_prime_seconds, fps))
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    kind: LabelKind,
    distance: usize,
}

impl Candidate {
    /// Whether `self` should replace `other` on the same head and frame.
    fn beats(&self, other: &Candidate) -> bool {
        match (self.kind.is_positive(), other.kind.is_positive()) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => (self.distance, self.kind) < (other.distance, other.kind),
            (false, false) => false,
        }
    }
}

#[derive(Default)]
struct HeadSlots {
    slots: BTreeMap<usize, Candidate>,
}

impl HeadSlots {
    fn offer(&mut self, frame: usize, cand: Candidate) {
        match self.slots.get(&frame) {
            Some(current) if !cand.beats(current) => {}
            _ => {
                self.slots.insert(frame, cand);
            }
        }
    }
}

fn window(center: usize, radius: usize, num_frames: usize) -> impl Iterator<Item = usize> {
    let lo = center.saturating_sub(radius);
    let hi = (center + radius).min(num_frames - 1);
    lo..=hi
}

/// Frames `t` with `lo <= |t - center| <= hi`, clipped to the video.
fn band(center: usize, lo: usize, hi: usize, num_frames: usize) -> impl Iterator<Item = usize> {
    let left = (center >= lo).then(|| center.saturating_sub(hi)..=center - lo);
    let right_start = center + lo;
    let right = (right_start < num_frames).then(|| right_start..=(center + hi).min(num_frames - 1));
    left.into_iter().flatten().chain(right.into_iter().flatten())
}

/// In-video pseudo labels (rules A-D) for one decoded localization.
pub fn build_labels_for(
    video_id: &str,
    num_frames: usize,
    fps: f64,
    loc: &Localization,
    cfg: &LabelRuleConfig,
    layout: &HeadLayout,
) -> Result<Vec<PseudoLabel>> {
    cfg.validate()?;
    if !loc.is_ordered() || loc.s2_frame >= num_frames {
        return Err(Error::Invalid(format!(
            "localization ({}, {}, {}) is not ordered within {} frames",
            loc.s1_frame, loc.action_frame, loc.s2_frame, num_frames
        )));
    }
    let (delta, delta_prime) = cfg.windows(fps);
    let rules = cfg.rules;
    let mut state = HeadSlots::default();
    let mut action = HeadSlots::default();
    let anchors = [(Role::Initial, LabelKind::S1), (Role::Action, LabelKind::A), (Role::End, LabelKind::S2)];

    if rules.a {
        for (role, kind) in anchors {
            let d = loc.frame(role);
            for t in window(d, delta, num_frames) {
                let slots = if kind.head() == Head::State { &mut state } else { &mut action };
                slots.offer(t, Candidate { kind, distance: t.abs_diff(d) });
            }
        }
    }
    if layout.supports(LabelKind::BgA) {
        let d = loc.action_frame;
        if rules.b {
            for t in band(d, delta_prime, delta_prime + delta, num_frames) {
                action.offer(t, Candidate { kind: LabelKind::BgA, distance: t.abs_diff(d) });
            }
        }
        if rules.c {
            for d in [loc.s1_frame, loc.s2_frame] {
                for t in window(d, delta, num_frames) {
                    action.offer(t, Candidate { kind: LabelKind::BgA, distance: t.abs_diff(d) });
                }
            }
        }
    }
    if rules.d && layout.supports(LabelKind::BgS) {
        let d = loc.action_frame;
        for t in window(d, delta, num_frames) {
            state.offer(t, Candidate { kind: LabelKind::BgS, distance: t.abs_diff(d) });
        }
    }

    let mut labels: Vec<PseudoLabel> = state
        .slots
        .into_iter()
        .chain(action.slots)
        .map(|(frame, cand)| PseudoLabel {
            video_id: video_id.to_string(),
            frame,
            category: loc.category,
            kind: cand.kind,
            weight: 1.0,
        })
        .collect();
    labels.sort_by(|a, b| (a.frame, a.kind).cmp(&(b.frame, b.kind)));
    Ok(labels)
}

/// In-video pseudo labels (rules A-D) for `video` decoded as `loc`.
pub fn build_labels(
    video: &VideoFeatures,
    loc: &Localization,
    cfg: &LabelRuleConfig,
    layout: &HeadLayout,
) -> Result<Vec<PseudoLabel>> {
    build_labels_for(&video.id, video.num_frames(), video.fps, loc, cfg, layout)
}

/// Distance from a label's frame to the decoded frame that produced it.
pub fn anchor_distance(label: &PseudoLabel, loc: &Localization) -> usize {
    let frames = match label.kind {
        LabelKind::S1 => vec![loc.s1_frame],
        LabelKind::S2 => vec![loc.s2_frame],
        LabelKind::A | LabelKind::BgS => vec![loc.action_frame],
        LabelKind::BgA => vec![loc.s1_frame, loc.action_frame, loc.s2_frame],
    };
    frames.into_iter().map(|d| d.abs_diff(label.frame)).min().unwrap_or(usize::MAX)
}

/// A batch member as seen by rule E.
#[derive(Debug, Clone, Copy)]
pub struct BatchVideo<'a> {
    pub id: &'a str,
    pub num_frames: usize,
    pub label: usize,
    /// Number of rule-A positives built for this video.
    pub positives: usize,
}

/// Rule E: explicit cross-category negatives for the multi-classifier model.
///
/// Each video with label `l` receives negatives against `l` on frames sampled
/// without replacement from batch videos whose label differs. Kinds alternate
/// between action background and (when the head has it) state background.
/// Other architectures return an empty set.
pub fn build_cross_task_negatives(
    batch: &[BatchVideo<'_>],
    cfg: &LabelRuleConfig,
    layout: &HeadLayout,
) -> Vec<PseudoLabel> {
    if !cfg.rules.e || layout.architecture != Architecture::MultiClassifier {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for video in batch {
        let foreign: Vec<&BatchVideo<'_>> = batch.iter().filter(|o| o.label != video.label).collect();
        let pool: usize = foreign.iter().map(|o| o.num_frames).sum();
        if pool == 0 {
            continue;
        }
        let wanted = cfg.explicit_negatives_per_video.unwrap_or(video.positives).min(pool);
        for (n, flat) in index::sample(&mut rng, pool, wanted).into_iter().enumerate() {
            let mut rest = flat;
            let source = foreign
                .iter()
                .find(|o| {
                    if rest < o.num_frames {
                        true
                    } else {
                        rest -= o.num_frames;
                        false
                    }
                })
                .expect("index within pool");
            let kind = if layout.state_background && n % 2 == 1 { LabelKind::BgS } else { LabelKind::BgA };
            out.push(PseudoLabel {
                video_id: source.id.to_string(),
                frame: rest,
                category: video.label,
                kind,
                weight: 1.0,
            });
        }
    }
    out
}
