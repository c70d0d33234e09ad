//! Training, evaluation and interpretation stages over clip sets.

use eegraph_core::evaluation::{
    argmax_rows, classification_metrics, detection_metrics, ClassificationMetrics, DetectionMetrics,
};
use eegraph_core::graph::EegGraph;
use eegraph_core::ingest::{AnnotationMask, Recording};
use eegraph_core::interpret::{
    coverage, localization, occlusion_classify, occlusion_detect, summarize, LocalizationSummary, OcclusionMap,
    OcclusionOptions,
};
use eegraph_core::model::{Model, ModelConfig, Task};
use eegraph_core::preprocess::EegClip;
use eegraph_core::training::{
    predict_logits, predict_probs, pretrain_self_supervised, threshold_search, train_auxiliary, train_classification,
    train_detection, AugmentFn, GraphSource, TrainOptions, TrainReport,
};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::WeightMeta;
use crate::config::{GraphSpec, RunConfig, StageConfig};
use crate::dataset::{Augmenter, ClipSet, ClipTask, Split};
use crate::error::{Error, Result};

/// Network shape for `task` under `run`.
pub fn model_config(run: &RunConfig, task: Task, input_dim: usize, dropout: f64) -> ModelConfig {
    let layers = match task {
        Task::Pretrain { .. } => run.model.pretrain_layers,
        _ => run.model.layers,
    };
    ModelConfig {
        conv_kind: run.conv_kind(),
        k: run.model.k,
        layers,
        hidden: run.model.hidden,
        input_dim,
        dropout_head: dropout,
        task,
        aux_horizon: None,
    }
}

fn expect_task(set: &ClipSet, want: ClipTask) -> Result<()> {
    if set.task != want {
        return Err(Error::Usage(format!("clip archive holds {:?} clips, {want:?} needed", set.task)));
    }
    Ok(())
}

fn n_features(set: &ClipSet) -> Result<usize> {
    set.clips.first().map(|c| c.clip.n_features).ok_or_else(|| Error::Usage("clip archive is empty".into()))
}

/// How a training stage runs besides its configuration.
#[derive(Default, Clone, Copy)]
pub struct StageOptions<'a> {
    /// Pretrained model whose encoder initializes the network; its shape
    /// overrides the configured one.
    pub init: Option<&'a Model>,
    /// Weight of the next-window objective in detection training.
    pub aux_lambda: Option<f64>,
    /// Source recordings, required when the stage augments.
    pub recordings: Option<&'a [Recording]>,
    pub progress: Option<&'a dyn Fn(&eegraph_core::training::EpochStats, &Model)>,
}

/// A trained model, rounded to the precision of the weight file, and its
/// report.
pub struct Trained {
    pub model: Model,
    pub meta: WeightMeta,
    pub report: TrainReport,
}

fn finish(
    mut model: Model,
    mut report: TrainReport,
    run: &RunConfig,
    set: &ClipSet,
    graphs: &GraphSource,
    batch: usize,
) -> Result<Trained> {
    model.params.round_to_f32();
    if model.config.task == Task::Detect {
        let val = set.inputs(Split::Val);
        let labels: Vec<bool> = val.iter().map(|c| c.label == Some(1)).collect();
        let refs: Vec<&EegClip> = val.iter().collect();
        let probs = predict_probs(&model, &refs, &graphs.prepare(&refs)?, batch)?;
        report.threshold = None;
        report.detection = None;
        if let Ok((t, _)) = threshold_search(&probs, &labels) {
            report.threshold = Some(t);
            report.detection = Some(detection_metrics(&probs, &labels, t)?);
        }
    }
    let meta = WeightMeta {
        graph: run.graph,
        channels: set.channels.clone(),
        threshold: report.threshold,
        run: serde_json::to_value(run).expect("config serializes"),
    };
    Ok(Trained { model, meta, report })
}

fn stage_for(run: &RunConfig, task: ClipTask) -> &StageConfig {
    match task {
        ClipTask::Detect => &run.detect,
        ClipTask::Classify => &run.classify,
        ClipTask::Pretrain => &run.pretrain,
    }
}

/// Detection or classification training on the train/val splits of `set`.
pub fn train_task(run: &RunConfig, set: &ClipSet, opts: StageOptions) -> Result<Trained> {
    let stage = stage_for(run, set.task);
    let m = n_features(set)?;
    let task = match set.task {
        ClipTask::Detect => Task::Detect,
        ClipTask::Classify => Task::Classify {
            n_classes: set
                .n_classes
                .ok_or_else(|| Error::Usage("classification archive without class count".into()))?,
        },
        ClipTask::Pretrain => return Err(Error::Usage("pretraining clips cannot train a task model".into())),
    };
    if opts.aux_lambda.is_some() && task != Task::Detect {
        return Err(Error::Usage("the auxiliary objective applies to detection only".into()));
    }
    let mut cfg = model_config(run, task, m, stage.dropout);
    if let Some(init) = opts.init {
        let e = &init.config;
        if e.conv_kind != cfg.conv_kind {
            return Err(Error::Config(format!(
                "pretrained encoder uses {:?} convolutions, the configured graph needs {:?}",
                e.conv_kind, cfg.conv_kind
            )));
        }
        cfg = ModelConfig { k: e.k, layers: e.layers, hidden: e.hidden, ..cfg };
    }
    let train = set.inputs(Split::Train);
    if opts.aux_lambda.is_some() {
        let t = train.first().map_or(0, |c| c.n_steps);
        cfg.aux_horizon = Some(t - t / 2);
    }
    let val = set.inputs(Split::Val);
    let graphs = run.graph.source(&set.channels)?;
    let tc = stage.train_config(run.seed, opts.aux_lambda);

    let augmenter = if stage.augment {
        let recs = opts
            .recordings
            .ok_or_else(|| Error::Config("augmentation is on but the source recordings are unavailable".into()))?;
        Some(Augmenter::new(recs, set, run.data.sample_rate)?)
    } else {
        None
    };
    let augment_fn = augmenter.as_ref().map(|a| {
        let train = &train;
        move |i: usize, rng: &mut ChaCha8Rng| -> eegraph_core::Result<EegClip> {
            a.augment(&train[i], rng).map_err(|e| eegraph_core::Error::InvalidArgument(e.to_string()))
        }
    });
    let topts = TrainOptions {
        init: opts.init,
        augment: augment_fn.as_ref().map(|f| f as &AugmentFn),
        progress: opts.progress,
    };
    let (model, report) = match (task, opts.aux_lambda) {
        (Task::Detect, None) => train_detection(&train, &val, &graphs, cfg, &tc, topts)?,
        (Task::Detect, Some(_)) => train_auxiliary(&train, &val, &graphs, cfg, &tc, topts)?,
        _ => train_classification(&train, &val, &graphs, cfg, &tc, topts)?,
    };
    finish(model, report, run, set, &graphs, stage.batch_size)
}

/// Sequence-to-sequence pretraining on the pairs of a pretraining set.
pub fn pretrain(run: &RunConfig, set: &ClipSet, opts: StageOptions) -> Result<Trained> {
    expect_task(set, ClipTask::Pretrain)?;
    let stage = &run.pretrain;
    if stage.augment {
        return Err(Error::Config("pretrain.augment is not supported: targets would no longer match".into()));
    }
    let horizon = set.horizon.ok_or_else(|| Error::Usage("pretraining archive without horizon".into()))?;
    let cfg = model_config(run, Task::Pretrain { horizon }, n_features(set)?, 0.0);
    let graphs = run.graph.source(&set.channels)?;
    let tc = stage.train_config(run.seed, None);
    let topts = TrainOptions { init: None, augment: None, progress: opts.progress };
    let (model, report) =
        pretrain_self_supervised(&set.pairs(Split::Train), &set.pairs(Split::Val), &graphs, cfg, &tc, topts)?;
    finish(model, report, run, set, &graphs, stage.batch_size)
}

/// Decision threshold for evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// The validation-chosen threshold stored with the weights, or a fresh
    /// search on the validation split when none is stored.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for Threshold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|t| t.is_finite())
            .map(Self::Fixed)
            .ok_or_else(|| format!("threshold must be a number or \"auto\", got {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: ClipTask,
    pub split: Split,
    pub n_clips: usize,
    pub detection: Option<DetectionMetrics>,
    pub classification: Option<ClassificationMetrics>,
}

fn weight_graphs(meta: &WeightMeta, set: &ClipSet) -> Result<GraphSource> {
    if meta.channels != set.channels {
        return Err(Error::Usage("weights and clips disagree on the channel set".into()));
    }
    meta.graph.source(&set.channels)
}

/// Detection probabilities of the clips of `split`, with their labels.
pub fn detection_scores(
    model: &Model,
    meta: &WeightMeta,
    set: &ClipSet,
    split: Split,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let graphs = weight_graphs(meta, set)?;
    let clips = set.inputs(split);
    let refs: Vec<&EegClip> = clips.iter().collect();
    let probs = predict_probs(model, &refs, &graphs.prepare(&refs)?, 64)?;
    Ok((probs, clips.iter().map(|c| c.label == Some(1)).collect()))
}

/// Metrics of `model` on one split of `set`.
pub fn evaluate(
    model: &Model,
    meta: &WeightMeta,
    set: &ClipSet,
    split: Split,
    threshold: Threshold,
) -> Result<EvalReport> {
    let n_clips = set.split(split).count();
    if n_clips == 0 {
        return Err(Error::Usage(format!("no {split:?} clips in the archive")));
    }
    let mut report = EvalReport { task: set.task, split, n_clips, detection: None, classification: None };
    match model.config.task {
        Task::Detect => {
            expect_task(set, ClipTask::Detect)?;
            let t = match threshold {
                Threshold::Fixed(t) => t,
                Threshold::Auto => match meta.threshold {
                    Some(t) => t,
                    None => {
                        let (p, l) = detection_scores(model, meta, set, Split::Val)?;
                        threshold_search(&p, &l)?.0
                    }
                },
            };
            let (probs, labels) = detection_scores(model, meta, set, split)?;
            report.detection = Some(detection_metrics(&probs, &labels, t)?);
        }
        Task::Classify { n_classes } => {
            expect_task(set, ClipTask::Classify)?;
            let graphs = weight_graphs(meta, set)?;
            let clips = set.inputs(split);
            let refs: Vec<&EegClip> = clips.iter().collect();
            let logits = predict_logits(model, &refs, &graphs.prepare(&refs)?, 64)?;
            let preds = argmax_rows(&logits, n_classes);
            let labels: Vec<usize> = clips.iter().map(|c| c.label.unwrap_or(usize::MAX)).collect();
            report.classification = Some(classification_metrics(&preds, &labels, n_classes)?);
        }
        Task::Pretrain { .. } => return Err(Error::Usage("pretraining weights have no task metrics".into())),
    }
    Ok(report)
}

/// Occlusion result of one annotated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSaliency {
    /// Position in the archive.
    pub index: usize,
    pub recording: String,
    pub start_sec: f64,
    /// Detected at the threshold, or classified correctly.
    pub correct: bool,
    pub coverage: f64,
    pub localization: f64,
    pub localization_degenerate: bool,
    pub map_degenerate: bool,
    #[serde(skip)]
    pub map: Option<OcclusionMap>,
    #[serde(skip)]
    pub graph: Option<EegGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretReport {
    pub task: ClipTask,
    pub split: Split,
    pub threshold: Option<f64>,
    pub freeze_graph: bool,
    pub n_clips: usize,
    pub n_correct: usize,
    /// Over every annotated clip.
    pub all: LocalizationSummary,
    /// Over correctly detected or classified clips.
    pub correct: LocalizationSummary,
    pub clips: Vec<ClipSaliency>,
}

/// Occlusion maps and coverage/localization scores of the annotated clips
/// of `split` (at most `limit`).
pub fn interpret(
    model: &Model,
    meta: &WeightMeta,
    set: &ClipSet,
    split: Split,
    run: &RunConfig,
    limit: Option<usize>,
) -> Result<InterpretReport> {
    let graphs = weight_graphs(meta, set)?;
    let opts = OcclusionOptions { freeze_graph: run.interpret.freeze_graph, batch_size: run.interpret.batch_size };
    let chosen: Vec<usize> = set
        .clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.split == split && c.annotation.as_ref().is_some_and(|a| a.count() > 0))
        .map(|(i, _)| i)
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    let threshold = match model.config.task {
        Task::Detect => Some(meta.threshold.unwrap_or(0.5)),
        _ => None,
    };
    let fixed = meta.graph.fixed_graph(&set.channels)?;
    let results: Vec<ClipSaliency> = chosen
        .par_iter()
        .map(|&i| -> Result<ClipSaliency> {
            let rec = &set.clips[i];
            let clip = &rec.clip;
            let annot: &AnnotationMask = rec.annotation.as_ref().expect("filtered on annotation");
            let (map, correct) = match model.config.task {
                Task::Detect => {
                    let p = predict_probs(model, &[clip], &graphs.prepare(&[clip])?, 1)?[0];
                    (occlusion_detect(model, clip, &graphs, &opts)?, p >= threshold.unwrap_or(0.5))
                }
                Task::Classify { n_classes } => {
                    let z = predict_logits(model, &[clip], &graphs.prepare(&[clip])?, 1)?;
                    (
                        occlusion_classify(model, clip, &graphs, &opts)?,
                        Some(argmax_rows(&z, n_classes)[0]) == clip.label,
                    )
                }
                Task::Pretrain { .. } => return Err(Error::Usage("pretraining weights cannot be interpreted".into())),
            };
            let loc = localization(&map, annot)?;
            let graph = match (&fixed, meta.graph) {
                (Some(g), _) => Some(g.clone()),
                (None, GraphSpec::Correlation { tau, lags }) => {
                    Some(eegraph_core::graph::build_correlation_graph(clip, tau, lags)?)
                }
                _ => None,
            };
            Ok(ClipSaliency {
                index: i,
                recording: clip.source.recording.clone(),
                start_sec: clip.source.start_sec,
                correct,
                coverage: coverage(&map, annot)?,
                localization: loc.value,
                localization_degenerate: loc.degenerate,
                map_degenerate: map.degenerate,
                map: Some(map),
                graph,
            })
        })
        .collect::<Result<_>>()?;
    let bins = run.interpret.hist_bins;
    let pairs = |only_correct: bool| -> Vec<(&OcclusionMap, &AnnotationMask)> {
        results
            .iter()
            .filter(|r| r.correct || !only_correct)
            .map(|r| (r.map.as_ref().expect("kept"), set.clips[r.index].annotation.as_ref().expect("kept")))
            .collect()
    };
    Ok(InterpretReport {
        task: set.task,
        split,
        threshold,
        freeze_graph: opts.freeze_graph,
        n_clips: results.len(),
        n_correct: results.iter().filter(|r| r.correct).count(),
        all: summarize(&pairs(false), bins)?,
        correct: summarize(&pairs(true), bins)?,
        clips: results,
    })
}
