//! Domain types shared by every stage: the category catalog, per-video
//! features, per-frame scores, decoded localizations and pseudo labels.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interaction category, e.g. "apple cutting": whole apple -> cutting -> sliced apple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub initial_state: String,
    pub end_state: String,
    pub action: String,
}

impl Category {
    pub fn new(name: &str, initial_state: &str, end_state: &str, action: &str) -> Self {
        Category {
            name: name.to_string(),
            initial_state: initial_state.to_string(),
            end_state: end_state.to_string(),
            action: action.to_string(),
        }
    }
}

/// Ordered list of interaction categories.
///
/// The order fixes the global class layout: category `c` owns state indices
/// `2c` (initial) and `2c + 1` (end) and action index `c`. Background classes,
/// when a head has one, sit at index `2N` (states) and `N` (actions).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CatalogRepr", into = "CatalogRepr")]
pub struct CategoryCatalog {
    categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct CatalogRepr {
    categories: Vec<Category>,
}

impl TryFrom<CatalogRepr> for CategoryCatalog {
    type Error = Error;
    fn try_from(repr: CatalogRepr) -> Result<Self> {
        CategoryCatalog::new(repr.categories)
    }
}

impl From<CategoryCatalog> for CatalogRepr {
    fn from(catalog: CategoryCatalog) -> Self {
        CatalogRepr { categories: catalog.categories }
    }
}

/// Which of the two states a state-head index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateKind {
    Initial,
    End,
}

impl CategoryCatalog {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Catalog("at least one category is required".into()));
        }
        let mut seen = HashSet::new();
        for cat in &categories {
            if !seen.insert(cat.name.as_str()) {
                return Err(Error::Catalog(format!("duplicate category name {:?}", cat.name)));
            }
        }
        Ok(CategoryCatalog { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, category: usize) -> Option<&Category> {
        self.categories.get(category)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.categories.iter().position(|c| c.name == name).ok_or_else(|| Error::UnknownCategory {
            name: name.to_string(),
            valid: self.names().join(","),
        })
    }

    pub fn names(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn state_index(&self, category: usize, kind: StateKind) -> usize {
        match kind {
            StateKind::Initial => 2 * category,
            StateKind::End => 2 * category + 1,
        }
    }

    pub fn action_index(&self, category: usize) -> usize {
        category
    }

    pub fn state_background_index(&self) -> usize {
        2 * self.len()
    }

    pub fn action_background_index(&self) -> usize {
        self.len()
    }

    /// Inverse of [`state_index`](Self::state_index); `None` for the background.
    pub fn state_owner(&self, index: usize) -> Option<(usize, StateKind)> {
        if index >= 2 * self.len() {
            return None;
        }
        let kind = if index % 2 == 0 { StateKind::Initial } else { StateKind::End };
        Some((index / 2, kind))
    }

    pub fn action_owner(&self, index: usize) -> Option<usize> {
        (index < self.len()).then_some(index)
    }

    pub fn check_category(&self, category: usize) -> Result<()> {
        if category < self.len() {
            Ok(())
        } else {
            Err(Error::CategoryOutOfRange { category, count: self.len() })
        }
    }
}

/// Per-frame features of one video together with its noisy video-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub label: usize,
    pub fps: f64,
    /// `T x D`, one row per frame.
    pub frames: Array2<f64>,
}

impl VideoFeatures {
    pub fn new(id: impl Into<String>, label: usize, fps: f64, frames: Array2<f64>) -> Self {
        VideoFeatures { id: id.into(), label, fps, frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Problems with this video, empty when it is valid for `catalog`.
    pub fn problems(&self, catalog: &CategoryCatalog) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_frames() < 3 {
            out.push(format!("too short for causal triple ({} frames)", self.num_frames()));
        }
        if self.dim() == 0 {
            out.push("feature dimension is zero".to_string());
        }
        if self.label >= catalog.len() {
            out.push(format!("label out of range ({} >= {})", self.label, catalog.len()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            out.push(format!("fps must be positive, got {}", self.fps));
        }
        if let Some(pos) = self.frames.iter().position(|v| !v.is_finite()) {
            let d = self.dim().max(1);
            out.push(format!("non-finite feature at frame {} dim {}", pos / d, pos % d));
        }
        out
    }

    pub fn validate(&self, catalog: &CategoryCatalog) -> Result<()> {
        match self.problems(catalog).into_iter().next() {
            None => Ok(()),
            Some(reason) if reason.starts_with("too short") => {
                Err(Error::TooShort { frames: self.num_frames() })
            }
            Some(reason) => Err(Error::Invalid(format!("video {}: {}", self.id, reason))),
        }
    }
}

/// Convert a duration in seconds to a frame count: nearest integer, at least 1.
pub fn seconds_to_frames(seconds: f64, fps: f64) -> usize {
    let frames = (seconds * fps).round();
    if frames < 1.0 {
        1
    } else {
        frames as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VideoCheck {
    pub video_id: String,
    pub ok: bool,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub videos: Vec<VideoCheck>,
}

impl ValidationReport {
    pub fn all_ok(&self) -> bool {
        self.videos.iter().all(|v| v.ok)
    }

    pub fn failures(&self) -> impl Iterator<Item = &VideoCheck> {
        self.videos.iter().filter(|v| !v.ok)
    }
}

pub fn validate_dataset(catalog: &CategoryCatalog, videos: &[VideoFeatures]) -> ValidationReport {
    let videos = videos
        .iter()
        .map(|video| {
            let reasons = video.problems(catalog);
            VideoCheck { video_id: video.id.clone(), ok: reasons.is_empty(), reasons }
        })
        .collect();
    ValidationReport { videos }
}

/// The four classifier layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// I: one disjoint model per category.
    Independent,
    /// II: shared trunk, per-category state softmax and action sigmoid.
    #[serde(rename = "multiclf")]
    MultiClassifier,
    /// III: one softmax over all 3N state and action classes.
    Joint1,
    /// IV: joint state softmax and joint action softmax with background.
    Joint2,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Independent,
        Architecture::MultiClassifier,
        Architecture::Joint1,
        Architecture::Joint2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Independent => "independent",
            Architecture::MultiClassifier => "multiclf",
            Architecture::Joint1 => "joint1",
            Architecture::Joint2 => "joint2",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Architecture::Independent => 1,
            Architecture::MultiClassifier => 2,
            Architecture::Joint1 => 3,
            Architecture::Joint2 => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.tag() == tag)
    }

    /// Per-category heads (I and II) as opposed to joint softmax heads.
    pub fn per_category(self) -> bool {
        matches!(self, Architecture::Independent | Architecture::MultiClassifier)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" | "I" => Ok(Architecture::Independent),
            "multiclf" | "II" => Ok(Architecture::MultiClassifier),
            "joint1" | "III" => Ok(Architecture::Joint1),
            "joint2" | "IV" => Ok(Architecture::Joint2),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected independent, multiclf, joint1 or joint2"
            ))),
        }
    }
}

/// Output layout of a classifier: architecture, category count and whether
/// the state head carries a background ("no state") class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadLayout {
    pub architecture: Architecture,
    pub categories: usize,
    pub state_background: bool,
}

impl HeadLayout {
    pub fn new(architecture: Architecture, categories: usize, state_background: bool) -> Self {
        // III has no background outputs at all.
        let state_background = state_background && architecture != Architecture::Joint1;
        HeadLayout { architecture, categories, state_background }
    }

    /// Per-category state block width for I/II (2 or 3).
    pub fn state_block(&self) -> usize {
        if self.state_background {
            3
        } else {
            2
        }
    }

    pub fn state_columns(&self) -> usize {
        let n = self.categories;
        match self.architecture {
            Architecture::Independent | Architecture::MultiClassifier => n * self.state_block(),
            Architecture::Joint1 => 2 * n,
            Architecture::Joint2 => 2 * n + usize::from(self.state_background),
        }
    }

    pub fn action_columns(&self) -> usize {
        let n = self.categories;
        match self.architecture {
            Architecture::Joint2 => n + 1,
            _ => n,
        }
    }

    pub fn has_action_background(&self) -> bool {
        self.architecture != Architecture::Joint1
    }

    pub fn supports(&self, kind: LabelKind) -> bool {
        match kind {
            LabelKind::S1 | LabelKind::S2 | LabelKind::A => true,
            LabelKind::BgS => self.state_background,
            LabelKind::BgA => self.has_action_background(),
        }
    }

    /// Column of `role` for `category` in the state or action block.
    pub fn column(&self, category: usize, role: Role) -> usize {
        match (self.architecture.per_category(), role) {
            (true, Role::Initial) => category * self.state_block(),
            (true, Role::End) => category * self.state_block() + 1,
            (false, Role::Initial) => 2 * category,
            (false, Role::End) => 2 * category + 1,
            (_, Role::Action) => category,
        }
    }
}

/// The three temporal roles decoded per video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "S1")]
    Initial,
    #[serde(rename = "A")]
    Action,
    #[serde(rename = "S2")]
    End,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Initial, Role::Action, Role::End];
}

/// Per-frame likelihoods produced by a classifier for every category.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub layout: HeadLayout,
    /// `T x layout.state_columns()`
    pub state: Array2<f64>,
    /// `T x layout.action_columns()`
    pub action: Array2<f64>,
}

impl FrameScores {
    pub fn new(layout: HeadLayout, state: Array2<f64>, action: Array2<f64>) -> Result<Self> {
        if state.nrows() != action.nrows() {
            return Err(Error::Dimension(format!(
                "state block has {} frames, action block {}",
                state.nrows(),
                action.nrows()
            )));
        }
        if state.ncols() != layout.state_columns() || action.ncols() != layout.action_columns() {
            return Err(Error::Dimension(format!(
                "expected {}+{} score columns for {}, got {}+{}",
                layout.state_columns(),
                layout.action_columns(),
                layout.architecture,
                state.ncols(),
                action.ncols()
            )));
        }
        Ok(FrameScores { layout, state, action })
    }

    pub fn num_frames(&self) -> usize {
        self.state.nrows()
    }

    pub fn num_categories(&self) -> usize {
        self.layout.categories
    }

    pub fn score(&self, category: usize, role: Role, frame: usize) -> f64 {
        let col = self.layout.column(category, role);
        match role {
            Role::Action => self.action[[frame, col]],
            _ => self.state[[frame, col]],
        }
    }

    /// The `(s1, a, s2)` likelihood tracks of one category.
    pub fn tracks(&self, category: usize) -> Result<[Vec<f64>; 3]> {
        if category >= self.num_categories() {
            return Err(Error::CategoryOutOfRange { category, count: self.num_categories() });
        }
        let track = |role| (0..self.num_frames()).map(|t| self.score(category, role, t)).collect();
        Ok([track(Role::Initial), track(Role::Action), track(Role::End)])
    }

    /// Check value range and softmax normalization; `tol` bounds row-sum error.
    pub fn check(&self, tol: f64) -> Result<()> {
        let bad = self.state.iter().chain(self.action.iter()).any(|v| !(v.is_finite() && (0.0..=1.0).contains(v)));
        if bad {
            return Err(Error::Invalid("frame scores must be finite and within [0, 1]".into()));
        }
        let n = self.num_categories();
        for t in 0..self.num_frames() {
            let state = self.state.row(t);
            let action = self.action.row(t);
            let sums: Vec<f64> = match self.layout.architecture {
                Architecture::Independent | Architecture::MultiClassifier => {
                    let k = self.layout.state_block();
                    (0..n).map(|c| state.iter().skip(c * k).take(k).sum()).collect()
                }
                Architecture::Joint1 => vec![state.sum() + action.sum()],
                Architecture::Joint2 => vec![state.sum(), action.sum()],
            };
            if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > tol) {
                return Err(Error::Invalid(format!("softmax row {t} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// A decoded (initial state, action, end state) frame triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub s1_frame: usize,
    pub action_frame: usize,
    pub s2_frame: usize,
    pub score: f64,
    pub category: usize,
}

impl Localization {
    pub fn frame(&self, role: Role) -> usize {
        match role {
            Role::Initial => self.s1_frame,
            Role::Action => self.action_frame,
            Role::End => self.s2_frame,
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.s1_frame < self.action_frame && self.action_frame < self.s2_frame
    }
}

/// Supervision target of a pseudo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKind {
    S1,
    S2,
    A,
    #[serde(rename = "BG_S")]
    BgS,
    #[serde(rename = "BG_A")]
    BgA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    State,
    Action,
}

impl LabelKind {
    pub const ALL: [LabelKind; 5] = [LabelKind::S1, LabelKind::S2, LabelKind::A, LabelKind::BgS, LabelKind::BgA];

    pub fn head(self) -> Head {
        match self {
            LabelKind::S1 | LabelKind::S2 | LabelKind::BgS => Head::State,
            LabelKind::A | LabelKind::BgA => Head::Action,
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, LabelKind::S1 | LabelKind::S2 | LabelKind::A)
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelKind::S1 => "S1",
            LabelKind::S2 => "S2",
            LabelKind::A => "A",
            LabelKind::BgS => "BG_S",
            LabelKind::BgA => "BG_A",
        }
    }

    pub fn role(self) -> Option<Role> {
        match self {
            LabelKind::S1 => Some(Role::Initial),
            LabelKind::S2 => Some(Role::End),
            LabelKind::A => Some(Role::Action),
            _ => None,
        }
    }
}

/// One per-frame training target `(video, frame, category, kind)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub video_id: String,
    pub frame: usize,
    pub category: usize,
    pub kind: LabelKind,
    pub weight: f64,
}

/// Ground-truth interval `[start, end]` (inclusive) for one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub kind: Role,
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTrack {
    pub video_id: String,
    pub intervals: Vec<Interval>,
}

impl AnnotationTrack {
    /// Whether `frame` lies inside any interval of kind `role`.
    pub fn hit(&self, role: Role, frame: usize) -> bool {
        self.intervals.iter().any(|iv| iv.kind == role && iv.contains(frame))
    }

    pub fn positives(&self, role: Role, num_frames: usize) -> Vec<bool> {
        (0..num_frames).map(|t| self.hit(role, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn catalog(n: usize) -> CategoryCatalog {
        CategoryCatalog::new(
            (0..n).map(|c| Category::new(&format!("cat{c}"), "before", "after", "act")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn minimal_video_passes() {
        let cat = catalog(2);
        let v = VideoFeatures::new("v", 1, 1.0, Array2::zeros((3, 2)));
        let report = validate_dataset(&cat, &[v]);
        assert!(report.all_ok());
    }

    #[test]
    fn short_video_fails() {
        let cat = catalog(2);
        let v = VideoFeatures::new("v", 0, 1.0, Array2::zeros((2, 2)));
        let report = validate_dataset(&cat, &[v.clone()]);
        assert!(!report.all_ok());
        assert!(report.videos[0].reasons[0].contains("too short for causal triple"));
        assert!(matches!(v.validate(&cat), Err(Error::TooShort { frames: 2 })));
    }

    #[test]
    fn label_out_of_range_fails() {
        let cat = catalog(2);
        let v = VideoFeatures::new("v", 5, 1.0, Array2::zeros((4, 2)));
        let report = validate_dataset(&cat, &[v]);
        assert!(report.videos[0].reasons.iter().any(|r| r.contains("label out of range")));
    }

    #[test]
    fn non_finite_features_fail() {
        let cat = catalog(1);
        let mut frames = Array2::zeros((4, 2));
        frames[[2, 1]] = f64::NAN;
        let v = VideoFeatures::new("v", 0, 1.0, frames);
        assert!(!validate_dataset(&cat, &[v]).all_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let cats = vec![Category::new("a", "x", "y", "z"), Category::new("a", "x", "y", "z")];
        assert!(CategoryCatalog::new(cats).is_err());
        assert!(CategoryCatalog::new(vec![]).is_err());
    }

    #[test]
    fn index_layout_is_a_bijection() {
        for n in 1..6 {
            let cat = catalog(n);
            for c in 0..n {
                for kind in [StateKind::Initial, StateKind::End] {
                    assert_eq!(cat.state_owner(cat.state_index(c, kind)), Some((c, kind)));
                }
                assert_eq!(cat.action_owner(cat.action_index(c)), Some(c));
            }
            assert_eq!(cat.state_owner(cat.state_background_index()), None);
            assert_eq!(cat.action_owner(cat.action_background_index()), None);
        }
    }

    #[test]
    fn seconds_round_to_frames() {
        assert_eq!(seconds_to_frames(2.0, 1.0), 2);
        assert_eq!(seconds_to_frames(60.0, 1.0), 60);
        assert_eq!(seconds_to_frames(0.2, 1.0), 1);
        assert_eq!(seconds_to_frames(2.0, 2.5), 5);
    }

    #[test]
    fn catalog_json_roundtrip_rejects_duplicates() {
        let cat = catalog(2);
        let text = serde_json::to_string(&cat).unwrap();
        let back: CategoryCatalog = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cat);
        let dup = r#"{"categories":[{"name":"a","initial_state":"x","end_state":"y","action":"z"},{"name":"a","initial_state":"x","end_state":"y","action":"z"}]}"#;
        assert!(serde_json::from_str::<CategoryCatalog>(dup).is_err());
    }
}
