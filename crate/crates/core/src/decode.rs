//! Constrained decoding of per-frame scores.
//!
//! A video's score for category `c` is the best product
//! `s1(i) * a(j) * s2(k)` over strictly ordered frames `i < j < k`. The
//! maximum is found in linear time: for each candidate action frame `j` the
//! best initial-state frame is a running prefix maximum over `[0, j)` and the
//! best end-state frame is a suffix maximum over `(j, T)`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::types::{FrameScores, Localization};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Accumulate log-likelihoods instead of raw products.
    pub log_space: bool,
    /// Lower clamp applied to every likelihood before taking logs.
    pub score_floor: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { log_space: true, score_floor: 1e-12 }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.score_floor > 0.0 && self.score_floor < 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("score_floor must lie in (0, 1), got {}", self.score_floor)))
        }
    }
}

/// Best ordered triple over three raw likelihood tracks of equal length.
///
/// Ties resolve to the lexicographically smallest `(i, j, k)`.
pub fn best_triple(s1: &[f64], action: &[f64], s2: &[f64], opts: &DecodeOptions) -> Result<(usize, usize, usize, f64)> {
    opts.validate()?;
    let t = s1.len();
    if action.len() != t || s2.len() != t {
        return Err(Error::Dimension("score tracks differ in length".into()));
    }
    if t < 3 {
        return Err(Error::TooShort { frames: t });
    }
    let prep = |v: f64| -> f64 {
        if opts.log_space {
            v.max(opts.score_floor).ln()
        } else {
            v
        }
    };
    let combine = |a: f64, b: f64| if opts.log_space { a + b } else { a * b };
    let s1: Vec<f64> = s1.iter().map(|&v| prep(v)).collect();
    let action: Vec<f64> = action.iter().map(|&v| prep(v)).collect();
    let s2: Vec<f64> = s2.iter().map(|&v| prep(v)).collect();

    // suffix_best[j] = smallest k > j maximizing s2[k]
    let mut suffix_best = vec![0usize; t];
    let mut best_k = t - 1;
    for j in (0..t - 1).rev() {
        let k = j + 1;
        if s2[k] >= s2[best_k] {
            best_k = k;
        }
        suffix_best[j] = best_k;
    }

    let mut best_i = 0usize;
    let mut best: Option<(usize, usize, usize, f64)> = None;
    for j in 1..t - 1 {
        // prefix over [0, j); strict comparison keeps the earliest maximizer
        if s1[j - 1] > s1[best_i] {
            best_i = j - 1;
        }
        let k = suffix_best[j];
        let value = combine(combine(s1[best_i], action[j]), s2[k]);
        let replace = match best {
            None => true,
            Some((bi, bj, bk, bv)) => match value.partial_cmp(&bv) {
                Some(Ordering::Greater) => true,
                Some(Ordering::Equal) => (best_i, j, k) < (bi, bj, bk),
                _ => bv.is_nan() && !value.is_nan(),
            },
        };
        if replace {
            best = Some((best_i, j, k, value));
        }
    }
    let (i, j, k, value) = best.expect("t >= 3 yields at least one triple");
    let score = if opts.log_space { value.exp() } else { value };
    Ok((i, j, k, score))
}

/// `p(c | v)`: the best causally ordered triple score for `category`.
pub fn score_video(scores: &FrameScores, category: usize, opts: &DecodeOptions) -> Result<f64> {
    localize(scores, category, opts).map(|loc| loc.score)
}

/// The maximizing triple for `category` with its score.
pub fn localize(scores: &FrameScores, category: usize, opts: &DecodeOptions) -> Result<Localization> {
    if scores.num_frames() < 3 {
        return Err(Error::TooShort { frames: scores.num_frames() });
    }
    let [s1, action, s2] = scores.tracks(category)?;
    let (i, j, k, score) = best_triple(&s1, &action, &s2, opts)?;
    Ok(Localization { s1_frame: i, action_frame: j, s2_frame: k, score, category })
}

/// All categories' localizations in category order.
pub fn localize_all(scores: &FrameScores, opts: &DecodeOptions) -> Result<Vec<Localization>> {
    (0..scores.num_categories()).map(|c| localize(scores, c, opts)).collect()
}

/// Most probable category `argmax_c p(c|v)`; ties go to the smallest index.
pub fn classify(scores: &FrameScores, opts: &DecodeOptions) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in 0..scores.num_categories() {
        let p = score_video(scores, c, opts)?;
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((c, p));
        }
    }
    best.ok_or_else(|| Error::Invalid("no categories to classify".into()))
}

/// Localizations of every category scoring strictly above `threshold`,
/// highest score first (equal scores keep category order).
pub fn detect_multi(scores: &FrameScores, threshold: f64, opts: &DecodeOptions) -> Result<Vec<Localization>> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("threshold must be nonnegative, got {threshold}")));
    }
    let mut hits: Vec<Localization> =
        localize_all(scores, opts)?.into_iter().filter(|loc| loc.score > threshold).collect();
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    Ok(hits)
}
