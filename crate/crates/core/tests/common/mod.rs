#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statechange::model::{ModelParams, Tower};
use statechange::pseudo::{LabelRuleConfig, RuleSet};
use statechange::types::{Architecture, HeadLayout, LabelKind, Localization, PseudoLabel};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Minimum |pre-activation| at labeled frames so a finite-difference probe never crosses a ReLU kink.
const KINK_MARGIN: f64 = 1e-3;

pub struct GradInstance {
    pub params: ModelParams,
    pub frames: Array2<f64>,
    pub labels: Vec<PseudoLabel>,
    pub weights: Vec<f64>,
}

fn pre_activations(p: &ModelParams, tower: &Tower, u: &Array1<f64>) -> Array1<f64> {
    let (w, b) = p.view(&tower.hidden);
    w.dot(u) + b
}

fn near_kink(p: &ModelParams, frames: &Array2<f64>, labels: &[PseudoLabel]) -> bool {
    labels.iter().any(|l| {
        let b = p.block_of(l.category);
        let block = p.blocks()[b];
        let (wa, ba) = p.view(&block.adapter);
        let u = wa.dot(&frames.row(l.frame)) + ba;
        std::iter::once(block.state)
            .chain(block.action)
            .any(|t| pre_activations(p, &t, &u).iter().any(|v| v.abs() < KINK_MARGIN))
    })
}

/// Random parameters, features and labels covering every label kind the
/// architecture supports, resampled until no ReLU sits near its kink.
pub fn grad_instance(arch: Architecture, seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=5);
        let h = rng.gen_range(2..=6);
        let t = rng.gen_range(3..=8);
        let layout = HeadLayout::new(arch, n, true);
        let mut params = ModelParams::init(layout, d, h, rng.gen()).unwrap();
        // move away from the identity adapter and zero biases
        for v in params.values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        let frames = Array2::from_shape_fn((t, d), |_| rng.gen_range(-1.5..1.5));
        let mut labels = Vec::new();
        for kind in LabelKind::ALL.into_iter().filter(|k| layout.supports(*k)) {
            for _ in 0..rng.gen_range(1..=3) {
                labels.push(PseudoLabel {
                    video_id: "g".into(),
                    frame: rng.gen_range(0..t),
                    category: rng.gen_range(0..n),
                    kind,
                    weight: 1.0,
                });
            }
        }
        let weights: Vec<f64> = labels.iter().map(|_| rng.gen_range(0.1..2.0)).collect();
        if !near_kink(&params, &frames, &labels) {
            return GradInstance { params, frames, labels, weights };
        }
    }
}

/// Largest relative error between analytic and central-difference gradients.
pub fn max_relative_error(inst: &GradInstance) -> f64 {
    let (_, analytic) = inst.params.backward(&inst.frames, &inst.labels, &inst.weights).unwrap();
    let mut probe = inst.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + FD_STEP;
        let up = probe.loss(&inst.frames, &inst.labels, &inst.weights).unwrap();
        probe.values_mut()[i] = orig - FD_STEP;
        let down = probe.loss(&inst.frames, &inst.labels, &inst.weights).unwrap();
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// One random input to the in-video label builder.
#[derive(Debug, Clone)]
pub struct LabelCase {
    pub num_frames: usize,
    pub fps: f64,
    pub delta_seconds: f64,
    pub delta_prime_seconds: f64,
    pub loc: Localization,
    pub rules: RuleSet,
    pub layout: HeadLayout,
}

pub fn label_case(rng: &mut ChaCha8Rng) -> LabelCase {
    let num_frames = if rng.gen_bool(0.3) { rng.gen_range(3..12) } else { rng.gen_range(3..400) };
    let mut triple = rand::seq::index::sample(rng, num_frames, 3).into_vec();
    triple.sort_unstable();
    let fps = [0.5, 1.0, 2.0, 3.0][rng.gen_range(0..4)];
    let delta_seconds = rng.gen_range(0.2..6.0);
    let delta_prime_seconds = delta_seconds + rng.gen_range(0.1..80.0);
    let rules = RuleSet { a: rng.gen(), b: rng.gen(), c: rng.gen(), d: rng.gen(), e: rng.gen() };
    let arch = [Architecture::Independent, Architecture::MultiClassifier, Architecture::Joint1, Architecture::Joint2][rng.gen_range(0..4)];
    let categories = rng.gen_range(1..5);
    LabelCase {
        num_frames,
        fps,
        delta_seconds,
        delta_prime_seconds,
        loc: Localization {
            s1_frame: triple[0],
            action_frame: triple[1],
            s2_frame: triple[2],
            score: 0.5,
            category: rng.gen_range(0..categories),
        },
        rules,
        layout: HeadLayout::new(arch, categories, rng.gen()),
    }
}

impl LabelCase {
    pub fn config(&self) -> LabelRuleConfig {
        LabelRuleConfig {
            delta_seconds: self.delta_seconds,
            delta_prime_seconds: self.delta_prime_seconds,
            rules: self.rules,
            ..Default::default()
        }
    }

    pub fn windows(&self) -> (usize, usize) {
        let frames = |s: f64| ((s * self.fps).round() as usize).max(1);
        (frames(self.delta_seconds), frames(self.delta_prime_seconds))
    }
}

/// Straightforward frame-by-frame statement of rules A-D and the conflict
/// order, written independently of the library's window iterators.
pub fn reference_labels(case: &LabelCase) -> BTreeSet<(usize, LabelKind)> {
    let (delta, delta_prime) = case.windows();
    let loc = &case.loc;
    let r = case.rules;
    let has_bg_a = case.layout.architecture != Architecture::Joint1;
    let has_bg_s = case.layout.state_background && case.layout.architecture != Architecture::Joint1;
    let dist = |t: usize, d: usize| if t > d { t - d } else { d - t };
    let mut out = BTreeSet::new();
    for t in 0..case.num_frames {
        let (d1, da, d2) = (dist(t, loc.s1_frame), dist(t, loc.action_frame), dist(t, loc.s2_frame));
        // state head
        let s1 = r.a && d1 <= delta;
        let s2 = r.a && d2 <= delta;
        if s1 && (!s2 || d1 <= d2) {
            out.insert((t, LabelKind::S1));
        } else if s2 {
            out.insert((t, LabelKind::S2));
        } else if r.d && has_bg_s && da <= delta {
            out.insert((t, LabelKind::BgS));
        }
        // action head
        if r.a && da <= delta {
            out.insert((t, LabelKind::A));
        } else if has_bg_a
            && ((r.b && delta_prime <= da && da <= delta_prime + delta) || (r.c && (d1 <= delta || d2 <= delta)))
        {
            out.insert((t, LabelKind::BgA));
        }
    }
    out
}

/// Every pseudo-module invariant for one built set; `Err` names the first violation.
pub fn check_label_invariants(case: &LabelCase, labels: &[PseudoLabel]) -> Result<(), String> {
    let (delta, delta_prime) = case.windows();
    let loc = &case.loc;
    let mut seen = BTreeSet::new();
    for l in labels {
        let head = matches!(l.kind, LabelKind::A | LabelKind::BgA);
        if !seen.insert((l.frame, head)) {
            return Err(format!("two labels on one head at frame {}", l.frame));
        }
        if l.frame >= case.num_frames {
            return Err(format!("frame {} outside video", l.frame));
        }
        if l.category != loc.category || l.weight != 1.0 {
            return Err("wrong category or weight".into());
        }
        let d = |x: usize| l.frame.abs_diff(x);
        let ok = match l.kind {
            LabelKind::S1 => case.rules.a && d(loc.s1_frame) <= delta,
            LabelKind::S2 => case.rules.a && d(loc.s2_frame) <= delta,
            LabelKind::A => case.rules.a && d(loc.action_frame) <= delta,
            LabelKind::BgS => case.rules.d && case.layout.state_background && d(loc.action_frame) <= delta,
            LabelKind::BgA => {
                case.layout.architecture != Architecture::Joint1
                    && ((case.rules.b && (delta_prime..=delta_prime + delta).contains(&d(loc.action_frame)))
                        || (case.rules.c && (d(loc.s1_frame) <= delta || d(loc.s2_frame) <= delta)))
            }
        };
        if !ok {
            return Err(format!("{:?} at frame {} violates window or gating", l.kind, l.frame));
        }
    }
    if case.rules.a {
        for kind in [LabelKind::S1, LabelKind::A, LabelKind::S2] {
            let n = labels.iter().filter(|l| l.kind == kind).count();
            if n == 0 || n > 2 * delta + 1 {
                return Err(format!("{kind:?} count {n} outside [1, {}]", 2 * delta + 1));
            }
        }
    }
    Ok(())
}
