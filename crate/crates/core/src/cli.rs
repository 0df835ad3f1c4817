//! Command-line surface: `synth`, `train`, `decode`, `classify`, `eval` and
//! `pca-export`.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::decode::{classify, detect_multi, localize, DecodeOptions};
use crate::error::{Error, Result};
use crate::evalkit::{
    classification_accuracy, mean_average_precision, pca_export, precision_at_1, role_probabilities, Prediction,
    PrecisionReport,
};
use crate::io::{load_dataset, read_annotations, read_checkpoint, read_json, write_atomic, write_checkpoint, write_dataset, write_json, write_jsonl, Dataset};
use crate::model::ModelParams;
use crate::parallel::Workers;
use crate::pseudo::{LabelRuleConfig, RuleSet};
use crate::synth::{generate, Split, SynthConfig};
use crate::train::{fit_observed, BatchRankWeight, ConstantWeight, HeldOut, OptimizerMode, TrainConfig, WeightHook};
use crate::types::{AnnotationTrack, Architecture, CategoryCatalog, LabelKind, VideoFeatures};

#[derive(Debug, Parser)]
#[command(name = "statechange", version, about = "Localize object states and state-modifying actions in per-frame video features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Self-train a model on a manifest's videos.
    Train(TrainArgs),
    /// Decode state/action frames for every video.
    Decode(DecodeArgs),
    /// Predict each video's category.
    Classify(ClassifyArgs),
    /// Score a checkpoint against annotations.
    Eval(EvalArgs),
    /// Project per-video adapter features onto their top two principal axes.
    PcaExport(PcaArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator config; omitted fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightChoice {
    Constant,
    BatchRank,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "joint2", value_parser = Architecture::from_str)]
    pub arch: Architecture,
    #[arg(long, default_value = "A,B,C,D,E", value_parser = RuleSet::from_str)]
    pub rules: RuleSet,
    /// Positive label neighborhood, seconds.
    #[arg(long, default_value_t = 2.0)]
    pub delta: f64,
    /// Action background distance, seconds.
    #[arg(long, default_value_t = 60.0)]
    pub delta_prime: f64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub adapter_lr: f64,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 25)]
    pub max_labels: usize,
    #[arg(long, default_value_t = 0.2)]
    pub action_scale: f64,
    /// Rule-E negatives per video; defaults to the video's positive count.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long, value_enum, default_value = "momentum-sgd")]
    pub optimizer: OptimizerChoice,
    #[arg(long, value_enum, default_value = "constant")]
    pub weight: WeightChoice,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch JSONL log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Write every mined pseudo label as JSONL.
    #[arg(long)]
    pub label_dump: Option<PathBuf>,
    /// Save the last epoch instead of the best held-out epoch.
    #[arg(long)]
    pub keep_final: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerChoice {
    MomentumSgd,
    PlainGd,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Localize under this category instead of each video's label.
    #[arg(long)]
    pub category: Option<String>,
    /// Report every category whose score exceeds this value.
    #[arg(long, conflicts_with = "category")]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Defaults to the manifest's annotation file.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long, default_value = "precision,map,accuracy")]
    pub metrics: String,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitChoice,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = Workers::from_env()?;
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Train(args) => train(&args, &workers),
        Command::Decode(args) => decode(&args, &workers),
        Command::Classify(args) => classify_videos(&args, &workers),
        Command::Eval(args) => eval(&args, &workers),
        Command::PcaExport(args) => pca(&args),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = generate(&cfg)?;
    let videos: Vec<(&VideoFeatures, Option<Split>)> = data.videos.iter().map(|v| (&v.features, Some(v.split))).collect();
    write_dataset(&args.out, &data.catalog, &videos, Some(&data.annotations))?;
    Ok(())
}

#[derive(Serialize)]
struct DumpRow<'a> {
    step: usize,
    video_id: &'a str,
    frame: usize,
    category: usize,
    kind: LabelKind,
    weight: f64,
    /// Decoded triple of the video the label was placed on.
    decoded: [usize; 3],
}

fn train(args: &TrainArgs, workers: &Workers) -> Result<()> {
    let data = load_dataset(&args.manifest)?;
    let videos = data.training_videos();
    let Some(dim) = videos.first().map(VideoFeatures::dim) else {
        return Err(Error::Invalid("manifest has no training videos".into()));
    };
    let hook: Arc<dyn WeightHook> = match args.weight {
        WeightChoice::Constant => Arc::new(ConstantWeight(1.0)),
        WeightChoice::BatchRank => Arc::new(BatchRankWeight),
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_videos: args.batch,
        base_lr_heads: args.lr,
        base_lr_adapter: args.adapter_lr,
        warmup_epochs: args.warmup,
        action_loss_scale: args.action_scale,
        optimizer: match args.optimizer {
            OptimizerChoice::MomentumSgd => OptimizerMode::MomentumSgd,
            OptimizerChoice::PlainGd => OptimizerMode::PlainGd,
        },
        weight_hook: hook,
        max_labeled_frames_per_video: args.max_labels,
        seed: args.seed,
        ..Default::default()
    };
    let rules = LabelRuleConfig {
        delta_seconds: args.delta,
        delta_prime_seconds: args.delta_prime,
        rules: args.rules,
        explicit_negatives_per_video: args.negatives,
        seed: args.seed,
    };
    let layout = args.rules.layout(args.arch, data.catalog().len());
    let params = ModelParams::init(layout, dim, args.hidden, args.seed)?;

    let test = data.select(|s| s == Some(Split::Test));
    let annotations = match data.annotations_path() {
        Some(path) if !test.is_empty() => Some(read_annotations(&path)?),
        _ => None,
    };
    let heldout = annotations.as_deref().map(|a| HeldOut { videos: &test, annotations: a });

    let mut dump = Vec::new();
    let want_dump = args.label_dump.is_some();
    let outcome = fit_observed(params, &videos, heldout, &cfg, &rules, &DecodeOptions::default(), workers, &mut |report, mined| {
        if want_dump {
            for vl in mined {
                let loc = vl.localization;
                for (label, weight) in vl.labels.iter().zip(&vl.weights) {
                    dump.push((report.step, label.clone(), *weight, [loc.s1_frame, loc.action_frame, loc.s2_frame]));
                }
            }
        }
        Ok(())
    })?;

    let keep = if args.keep_final { &outcome.final_params } else { &outcome.params };
    write_checkpoint(&args.out, keep, data.catalog())?;
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    write_jsonl(&log_path, &outcome.log)?;
    if let Some(path) = &args.label_dump {
        let rows: Vec<DumpRow<'_>> = dump
            .iter()
            .map(|(step, l, w, decoded)| DumpRow {
                step: *step,
                video_id: &l.video_id,
                frame: l.frame,
                category: l.category,
                kind: l.kind,
                weight: *w,
                decoded: *decoded,
            })
            .collect();
        write_jsonl(path, &rows)?;
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// Checkpoint plus dataset, with matching catalogs and feature widths.
fn load_pair(ckpt: &Path, manifest: &Path) -> Result<(ModelParams, Dataset)> {
    let (params, catalog) = read_checkpoint(ckpt)?;
    let data = load_dataset(manifest)?;
    if &catalog != data.catalog() {
        return Err(Error::Catalog(format!(
            "checkpoint categories [{}] differ from manifest categories [{}]",
            catalog.names().join(", "),
            data.catalog().names().join(", ")
        )));
    }
    if let Some(v) = data.videos.iter().find(|v| v.dim() != params.dim()) {
        return Err(Error::Dimension(format!("video {} has {} features, model expects {}", v.id, v.dim(), params.dim())));
    }
    Ok((params, data))
}

#[derive(Serialize)]
struct DecodeRow<'a> {
    video_id: &'a str,
    category_name: &'a str,
    #[serde(flatten)]
    loc: crate::types::Localization,
}

fn decode(args: &DecodeArgs, workers: &Workers) -> Result<()> {
    let (params, data) = load_pair(&args.ckpt, &args.manifest)?;
    let catalog = data.catalog();
    let fixed = args.category.as_deref().map(|name| catalog.index_of(name)).transpose()?;
    let opts = DecodeOptions::default();
    let per_video = workers.map(&data.videos, |v| -> Result<Vec<crate::types::Localization>> {
        let scores = params.forward(&v.frames)?;
        match args.threshold {
            Some(th) => detect_multi(&scores, th, &opts),
            None => Ok(vec![localize(&scores, fixed.unwrap_or(v.label), &opts)?]),
        }
    });
    let mut rows = Vec::new();
    for (video, locs) in data.videos.iter().zip(per_video) {
        for loc in locs? {
            rows.push(DecodeRow { video_id: &video.id, category_name: category_name(catalog, loc.category), loc });
        }
    }
    write_jsonl(&args.out, &rows)
}

fn category_name(catalog: &CategoryCatalog, c: usize) -> &str {
    catalog.get(c).map_or("", |cat| cat.name.as_str())
}

#[derive(Serialize)]
struct ClassifyRow<'a> {
    video_id: &'a str,
    label: usize,
    predicted: usize,
    predicted_name: &'a str,
    probability: f64,
}

fn classify_videos(args: &ClassifyArgs, workers: &Workers) -> Result<()> {
    let (params, data) = load_pair(&args.ckpt, &args.manifest)?;
    let opts = DecodeOptions::default();
    let preds = workers.map(&data.videos, |v| params.forward(&v.frames).and_then(|s| classify(&s, &opts)));
    let mut rows = Vec::with_capacity(preds.len());
    for (v, pred) in data.videos.iter().zip(preds) {
        let (c, p) = pred?;
        rows.push(ClassifyRow {
            video_id: &v.id,
            label: v.label,
            predicted: c,
            predicted_name: category_name(data.catalog(), c),
            probability: p,
        });
    }
    write_jsonl(&args.out, &rows)
}

#[derive(Debug, Clone, Copy, Default)]
struct MetricSet {
    precision: bool,
    map: bool,
    accuracy: bool,
}

impl FromStr for MetricSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = MetricSet::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "precision" => m.precision = true,
                "map" => m.map = true,
                "accuracy" => m.accuracy = true,
                other => {
                    return Err(Error::Config(format!("unknown metric {other:?}; expected precision, map or accuracy")))
                }
            }
        }
        if !(m.precision || m.map || m.accuracy) {
            return Err(Error::Config("no metrics requested".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    /// Annotated videos the metrics were computed on.
    pub videos: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<PrecisionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

fn eval(args: &EvalArgs, workers: &Workers) -> Result<()> {
    let metrics: MetricSet = args.metrics.parse()?;
    let (params, data) = load_pair(&args.ckpt, &args.manifest)?;
    let ann_path = match (&args.annotations, data.annotations_path()) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p,
        (None, None) => return Err(Error::Config("no --annotations given and the manifest names none".into())),
    };
    let annotations = read_annotations(&ann_path)?;
    let split = args.split;
    let selected = data.select(|s| match split {
        SplitChoice::All => true,
        SplitChoice::Train => s != Some(Split::Test),
        SplitChoice::Test => s == Some(Split::Test),
    });
    let tracks: Vec<(&VideoFeatures, &AnnotationTrack)> = selected
        .iter()
        .filter_map(|v| annotations.iter().find(|a| a.video_id == v.id).map(|a| (v, a)))
        .collect();
    if tracks.is_empty() {
        return Err(Error::MissingAnnotation("no selected video has an annotation track".into()));
    }
    let opts = DecodeOptions::default();
    let scores: Vec<_> = workers
        .map(&tracks, |(v, _)| params.forward(&v.frames))
        .into_iter()
        .collect::<Result<_>>()?;

    let precision = if metrics.precision {
        let preds: Vec<Prediction> = tracks
            .iter()
            .zip(&scores)
            .map(|((v, _), s)| Ok(Prediction { video_id: v.id.clone(), loc: localize(s, v.label, &opts)? }))
            .collect::<Result<_>>()?;
        let own: Vec<AnnotationTrack> = tracks.iter().map(|(_, a)| (*a).clone()).collect();
        Some(precision_at_1(&preds, &own)?)
    } else {
        None
    };
    let map = if metrics.map {
        let per_video = tracks
            .iter()
            .zip(&scores)
            .map(|((v, a), s)| Ok((role_probabilities(s, v.label)?, *a)))
            .collect::<Result<Vec<_>>>()?;
        Some(mean_average_precision(&per_video)?)
    } else {
        None
    };
    let accuracy = if metrics.accuracy {
        let labels: Vec<usize> = tracks.iter().map(|(v, _)| v.label).collect();
        Some(classification_accuracy(&scores, &labels, &opts)?)
    } else {
        None
    };
    write_json(&args.out, &EvalReport { videos: tracks.len(), precision, map, accuracy })
}

fn pca(args: &PcaArgs) -> Result<()> {
    let (params, data) = load_pair(&args.ckpt, &args.manifest)?;
    let rows = pca_export(&params, &data.videos, &DecodeOptions::default())?;
    let out = &args.out;
    write_atomic(out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for row in &rows {
            csv.serialize(row).map_err(|e| Error::Invalid(format!("{}: {e}", out.display())))?;
        }
        csv.flush().map_err(|e| Error::io(out, e))
    })
}
