//! Evaluation: single-frame precision, per-frame mean average precision,
//! video classification accuracy and a PCA projection of learned features.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::decode::{classify, localize, DecodeOptions};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::types::{AnnotationTrack, FrameScores, Localization, Role, VideoFeatures};

/// A localization attached to the video it was decoded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    #[serde(flatten)]
    pub loc: Localization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrecision {
    pub category: usize,
    pub videos: usize,
    pub state_precision: f64,
    pub action_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub state_precision: f64,
    pub action_precision: f64,
    pub per_category: Vec<CategoryPrecision>,
}

/// Precision of single predicted frames against ground-truth intervals.
///
/// Per video the state score is the mean correctness of the initial and end
/// state frames, the action score the correctness of the action frame. Scores
/// are averaged within each category, then across categories.
pub fn precision_at_1(predictions: &[Prediction], annotations: &[AnnotationTrack]) -> Result<PrecisionReport> {
    let by_id: HashMap<&str, &AnnotationTrack> = annotations.iter().map(|a| (a.video_id.as_str(), a)).collect();
    let mut sums: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for pred in predictions {
        let track = by_id
            .get(pred.video_id.as_str())
            .ok_or_else(|| Error::MissingAnnotation(pred.video_id.clone()))?;
        let hit = |role: Role| if track.hit(role, pred.loc.frame(role)) { 1.0 } else { 0.0 };
        let state = 0.5 * (hit(Role::Initial) + hit(Role::End));
        let entry = sums.entry(pred.loc.category).or_default();
        entry.0 += 1;
        entry.1 += state;
        entry.2 += hit(Role::Action);
    }
    let per_category: Vec<CategoryPrecision> = sums
        .into_iter()
        .map(|(category, (videos, s, a))| CategoryPrecision {
            category,
            videos,
            state_precision: s / videos as f64,
            action_precision: a / videos as f64,
        })
        .collect();
    let k = per_category.len().max(1) as f64;
    Ok(PrecisionReport {
        state_precision: per_category.iter().map(|c| c.state_precision).sum::<f64>() / k,
        action_precision: per_category.iter().map(|c| c.action_precision).sum::<f64>() / k,
        per_category,
    })
}

/// Average precision of one ranking; `None` when there are no positives.
///
/// Frames are ranked by descending score, equal scores by ascending index.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|r| **r).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(total / positives as f64)
}

/// Column order of per-frame probability matrices.
pub const ROLE_COLUMNS: [Role; 3] = [Role::Initial, Role::Action, Role::End];

/// `T x 3` matrix of `(s1, a, s2)` likelihoods for `category`.
pub fn role_probabilities(scores: &FrameScores, category: usize) -> Result<Array2<f64>> {
    let tracks = scores.tracks(category)?;
    Ok(Array2::from_shape_fn((scores.num_frames(), 3), |(t, r)| tracks[r][t]))
}

/// Mean of per-(video, role) average precision; roles without positive
/// frames in a video are skipped.
pub fn mean_average_precision(per_video: &[(Array2<f64>, &AnnotationTrack)]) -> Result<f64> {
    let mut aps = Vec::new();
    for (probs, track) in per_video {
        if probs.ncols() != 3 {
            return Err(Error::Dimension(format!("expected T x 3 probabilities, got {} columns", probs.ncols())));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("non-finite probability for video {}", track.video_id)));
        }
        for (r, role) in ROLE_COLUMNS.into_iter().enumerate() {
            let col: Vec<f64> = probs.column(r).to_vec();
            if let Some(ap) = average_precision(&col, &track.positives(role, probs.nrows())) {
                aps.push(ap);
            }
        }
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Fraction of videos whose most probable category equals the true label.
pub fn classification_accuracy(scores: &[FrameScores], labels: &[usize], opts: &DecodeOptions) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid("classification needs one label per scored video and at least one video".into()));
    }
    let mut correct = 0usize;
    for (s, &label) in scores.iter().zip(labels) {
        if classify(s, opts)?.0 == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaRow {
    pub video_id: String,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

pub const PCA_COSINE_TOL: f64 = 1e-10;

/// Leading eigenpairs of a symmetric matrix by power iteration with deflation.
///
/// Iteration stops once successive iterates have cosine at least
/// `1 - PCA_COSINE_TOL`. Eigenvectors are sign-normalized so their largest
/// magnitude entry is positive.
pub fn top_eigenpairs(matrix: &Array2<f64>, k: usize, max_iter: usize) -> Vec<(f64, Array1<f64>)> {
    let d = matrix.nrows();
    let mut deflated = matrix.clone();
    let mut out = Vec::new();
    for comp in 0..k.min(d) {
        // deterministic start that is unlikely to be orthogonal to the target
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + ((i + 1) * (comp + 3)) as f64 % 7.0 / 10.0);
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let w = deflated.dot(&v);
            let norm = w.dot(&w).sqrt();
            if norm < 1e-300 {
                lambda = 0.0;
                break;
            }
            let next = &w / norm;
            let cos = next.dot(&v).abs();
            v = next;
            lambda = v.dot(&deflated.dot(&v));
            if cos >= 1.0 - PCA_COSINE_TOL {
                break;
            }
        }
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        let outer = Array2::from_shape_fn((d, d), |(i, j)| v[i] * v[j]);
        deflated = deflated - outer * lambda;
        out.push((lambda, v));
    }
    out
}

/// Projection of rows onto their top two principal directions.
pub fn project_top2(rows: &Array2<f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mean = rows.mean_axis(ndarray::Axis(0)).expect("at least one row");
    let centered = rows - &mean;
    if centered.iter().all(|v| v.abs() < 1e-300) {
        return Array2::zeros((n, 2));
    }
    let cov = centered.t().dot(&centered) / n as f64;
    let pairs = top_eigenpairs(&cov, 2, 10_000);
    let mut out = Array2::zeros((n, 2));
    for (k, (lambda, v)) in pairs.iter().enumerate() {
        if *lambda <= 0.0 {
            continue;
        }
        out.column_mut(k).assign(&centered.dot(v));
    }
    out
}

/// Per-video 2-D coordinates of the adapter features averaged over the
/// video's three decoded frames.
pub fn pca_export(params: &ModelParams, videos: &[VideoFeatures], opts: &DecodeOptions) -> Result<Vec<PcaRow>> {
    if videos.len() < 3 {
        return Err(Error::Invalid(format!("PCA export needs at least 3 videos, got {}", videos.len())));
    }
    let mut rows = Array2::zeros((videos.len(), params.dim()));
    for (i, video) in videos.iter().enumerate() {
        let scores = params.forward(&video.frames)?;
        let loc = localize(&scores, video.label, opts)?;
        let block = params.block_of(video.label);
        let mut acc = Array1::zeros(params.dim());
        for role in Role::ALL {
            let x = video.frames.row(loc.frame(role)).to_vec();
            acc += &Array1::from(params.adapt_frame(block, &x));
        }
        rows.row_mut(i).assign(&(acc / 3.0));
    }
    let coords = project_top2(&rows);
    Ok(videos
        .iter()
        .enumerate()
        .map(|(i, v)| PcaRow { video_id: v.id.clone(), label: v.label, pc1: coords[[i, 0]], pc2: coords[[i, 1]] })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Interval;

    fn track(id: &str, s1: (usize, usize), a: (usize, usize), s2: (usize, usize)) -> AnnotationTrack {
        AnnotationTrack {
            video_id: id.into(),
            intervals: vec![
                Interval { kind: Role::Initial, start: s1.0, end: s1.1 },
                Interval { kind: Role::Action, start: a.0, end: a.1 },
                Interval { kind: Role::End, start: s2.0, end: s2.1 },
            ],
        }
    }

    fn pred(id: &str, s1: usize, a: usize, s2: usize, category: usize) -> Prediction {
        Prediction { video_id: id.into(), loc: Localization { s1_frame: s1, action_frame: a, s2_frame: s2, score: 1.0, category } }
    }

    #[test]
    fn precision_examples() {
        let tracks = [track("v", (0, 2), (4, 5), (7, 9))];
        let r = precision_at_1(&[pred("v", 1, 4, 9, 0)], &tracks).unwrap();
        assert_eq!((r.state_precision, r.action_precision), (1.0, 1.0));
        let r = precision_at_1(&[pred("v", 1, 5, 6, 0)], &tracks).unwrap();
        assert_eq!((r.state_precision, r.action_precision), (0.5, 1.0));
        assert!(matches!(precision_at_1(&[pred("w", 1, 5, 6, 0)], &tracks), Err(Error::MissingAnnotation(_))));
    }

    #[test]
    fn precision_averages_categories_not_videos() {
        let tracks = [track("a", (0, 0), (1, 1), (2, 2)), track("b", (0, 0), (1, 1), (2, 2)), track("c", (0, 0), (1, 1), (2, 2))];
        // category 0: two perfect videos, category 1: one miss
        let preds = [pred("a", 0, 1, 2, 0), pred("b", 0, 1, 2, 0), pred("c", 3, 4, 5, 1)];
        let r = precision_at_1(&preds, &tracks).unwrap();
        assert_eq!(r.state_precision, 0.5);
        assert_eq!(r.action_precision, 0.5);
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = average_precision(&[1.0, 1.0, 1.0, 0.0], &[false, false, false, true]).unwrap();
        assert!((ap - 0.25).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
    }

    #[test]
    fn map_of_indicators_is_one() {
        let t = track("v", (0, 1), (3, 3), (5, 6));
        let probs = Array2::from_shape_fn((8, 3), |(f, r)| if t.hit(ROLE_COLUMNS[r], f) { 1.0 } else { 0.0 });
        assert_eq!(mean_average_precision(&[(probs, &t)]).unwrap(), 1.0);
    }

    #[test]
    fn eigenpairs_of_diagonal() {
        let m = Array2::from_diag(&Array1::from(vec![1.0, 5.0, 3.0]));
        let pairs = top_eigenpairs(&m, 2, 10_000);
        assert!((pairs[0].0 - 5.0).abs() < 1e-9);
        assert!((pairs[1].0 - 3.0).abs() < 1e-9);
        assert!((pairs[0].1[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn collinear_rows_have_zero_pc2() {
        let rows = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - 2.0) * (j as f64 + 1.0));
        let p = project_top2(&rows);
        assert!(p.column(1).iter().all(|v| v.abs() < 1e-9));
        assert!(p.column(0).iter().any(|v| v.abs() > 1.0));
    }

    #[test]
    fn identical_rows_project_to_zero() {
        let rows = Array2::from_elem((5, 3), 2.5);
        assert!(project_top2(&rows).iter().all(|v| *v == 0.0));
    }
}
