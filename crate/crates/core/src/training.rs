//! Optimization and the training procedures: detection, classification,
//! self-supervised pretraining and detection with an auxiliary
//! next-window objective.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{self, ClassificationMetrics, DetectionMetrics};
use crate::graph::{build_correlation_graph, graph_operators, GraphOperators, LagMode};
use crate::model::{self, Model, ModelConfig, Supports, Task};
use crate::preprocess::EegClip;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{sigmoid, Gradients, ParamStore, Tape, Var};
use crate::{Error, Result};

fn default_batch() -> usize {
    40
}

fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub epochs_max: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the auxiliary next-window loss; required by
    /// [`train_auxiliary`].
    #[serde(default)]
    pub lambda_aux: Option<f64>,
    /// Balance detection classes by dropping surplus clips.
    #[serde(default)]
    pub undersample: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return bad("need 0 <= lr_min <= lr_init and lr_init > 0");
        }
        if self.patience < 1 || self.batch_size < 1 || self.epochs_max < 1 {
            return bad("patience, batch_size and epochs_max must be positive");
        }
        if let Some(l) = self.lambda_aux {
            if !(l >= 0.0) || !l.is_finite() {
                return bad("lambda_aux must be a finite non-negative number");
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam update. Parameters without a gradient are treated as having a
/// zero gradient. Nothing changes if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("optimizer holds {} tensors, model {}", state.m.len(), params.len())));
    }
    for id in params.ids() {
        if let Some(g) = grads.get(id) {
            if g.len() != params.get(id).len() {
                return Err(Error::Shape(format!("gradient of {} has the wrong size", params.name(id))));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for id in params.ids().collect::<Vec<_>>() {
        let g = grads.get(id).map(|t| t.data.as_slice());
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        for (k, p) in params.get_mut(id).data.iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *p -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `lr_min + ½ (lr_max − lr_min)(1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    if step >= total_steps {
        return lr_min;
    }
    let c = (core::f64::consts::PI * step as f64 / total_steps as f64).cos();
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + c)
}

/// Stops after `patience` epochs without a strict improvement of the
/// validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    /// 1-based epoch of `best`.
    pub best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, epoch: 0 }
    }

    /// Records one epoch; returns `(improved, stop)`.
    pub fn update(&mut self, val_loss: f64) -> (bool, bool) {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
        }
        (improved, self.epoch - self.best_epoch >= self.patience)
    }
}

/// Returns the threshold maximizing F1 with `predict = prob ≥ threshold`,
/// scanning every distinct probability (and 0 and 1). Ties keep the lowest
/// candidate; 0 and 1 win only when strictly better.
pub fn threshold_search(probs: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", probs.len(), labels.len())));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("probabilities"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // walking upward, everything at or above idx[i] is predicted positive
    let (mut tp, mut fp) = (pos, labels.len() - pos);
    let f1_at = |tp: usize, fp: usize| evaluation::f1_from_counts(tp, fp, pos - tp).value;
    let mut best = (probs[idx[0]], f1_at(tp, fp));
    let mut i = 0;
    while i < idx.len() {
        let v = probs[idx[i]];
        let f = f1_at(tp, fp);
        if f > best.1 {
            best = (v, f);
        }
        while i < idx.len() && probs[idx[i]] == v {
            if labels[idx[i]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
    }
    for edge in [0.0, 1.0] {
        let tp = idx.iter().filter(|&&k| probs[k] >= edge && labels[k]).count();
        let fp = idx.iter().filter(|&&k| probs[k] >= edge && !labels[k]).count();
        let f = f1_at(tp, fp);
        if f > best.1 {
            best = (edge, f);
        }
    }
    Ok(best)
}

/// Where the graph of a clip comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    /// One fixed graph for every clip.
    Shared(GraphOperators),
    /// A correlation graph built from each clip.
    Correlation { tau: usize, lags: LagMode },
}

impl GraphSource {
    pub fn for_clip(&self, clip: &EegClip) -> Result<Cow<'_, GraphOperators>> {
        match self {
            Self::Shared(ops) => Ok(Cow::Borrowed(ops)),
            Self::Correlation { tau, lags } => {
                Ok(Cow::Owned(graph_operators(&build_correlation_graph(clip, *tau, *lags)?)?))
            }
        }
    }

    /// Graphs for a whole clip set, computed once.
    pub fn prepare<'a>(&'a self, clips: &[&EegClip]) -> Result<ClipGraphs<'a>> {
        match self {
            Self::Shared(ops) => Ok(ClipGraphs::Shared(ops)),
            Self::Correlation { .. } => Ok(ClipGraphs::PerClip(
                clips.iter().map(|c| self.for_clip(c).map(Cow::into_owned)).collect::<Result<_>>()?,
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ClipGraphs<'a> {
    Shared(&'a GraphOperators),
    PerClip(Vec<GraphOperators>),
}

impl ClipGraphs<'_> {
    pub fn get(&self, i: usize) -> &GraphOperators {
        match self {
            Self::Shared(ops) => ops,
            Self::PerClip(v) => &v[i],
        }
    }
}

/// Produces a fresh training clip for original index `i` (augmentation).
pub type AugmentFn<'a> = dyn Fn(usize, &mut ChaCha8Rng) -> Result<EegClip> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Default, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Encoder initialization (pretrained weights).
    pub init: Option<&'a Model>,
    pub augment: Option<&'a AugmentFn<'a>>,
    /// Called after every epoch with the current weights.
    pub progress: Option<&'a dyn Fn(&EpochStats, &Model)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
    /// Training clips per class after any undersampling.
    pub class_counts: Vec<usize>,
    pub threshold: Option<f64>,
    pub detection: Option<DetectionMetrics>,
    pub classification: Option<ClassificationMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Detect,
    Classify,
    Pretrain,
    Auxiliary { lambda: f64, half: usize },
}

/// One training or validation example.
#[derive(Debug, Clone, Copy)]
struct Example<'a> {
    input: &'a EegClip,
    target: Option<&'a EegClip>,
    /// Index into the caller's clip set, for augmentation.
    origin: usize,
}

fn stack_predictions(tape: &mut Tape, preds: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = preds
        .iter()
        .map(|&p| {
            let n = tape.value(p).len();
            tape.reshape(p, vec![1, n])
        })
        .collect::<Result<_>>()?;
    tape.concat(&flat)
}

/// Next-window loss of `preds` against `targets`, averaged over valid entries.
fn frame_loss(tape: &mut Tape, preds: &[Var], targets: &[&EegClip]) -> Result<Var> {
    let stacked = stack_predictions(tape, preds)?;
    let (y, mask) = model::target_frames(targets, preds.len())?;
    tape.masked_l1(stacked, &y, &mask)
}

fn detect_targets(clips: &[&EegClip]) -> Result<Vec<f64>> {
    clips
        .iter()
        .map(|c| match c.label {
            Some(0) => Ok(0.0),
            Some(1) => Ok(1.0),
            Some(k) => Err(Error::ClassOutOfRange { index: k, n_classes: 2 }),
            None => Err(Error::InvalidArgument("unlabeled detection clip".into())),
        })
        .collect()
}

fn class_targets(clips: &[&EegClip]) -> Result<Vec<usize>> {
    clips.iter().map(|c| c.label.ok_or_else(|| Error::InvalidArgument("unlabeled clip".into()))).collect()
}

/// Loss of one batch. `teacher` selects teacher forcing for decoders.
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    objective: Objective,
    inputs: &[&EegClip],
    targets: &[&EegClip],
    ops: &[&GraphOperators],
    teacher: bool,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let cfg = &model.config;
    match objective {
        Objective::Detect => {
            let z = model.logits(tape, inputs, ops, dropout)?;
            tape.bce_with_logits(z, &detect_targets(inputs)?)
        }
        Objective::Classify => {
            let z = model.logits(tape, inputs, ops, dropout)?;
            tape.cross_entropy(z, &class_targets(inputs)?)
        }
        Objective::Pretrain => {
            let horizon = cfg.decoder_horizon().expect("pretraining model has a decoder");
            let bound = model.bind(tape)?;
            let sup = Supports::new(tape, cfg.conv_kind, cfg.k, ops)?;
            let enc = model::encode(tape, &bound.encoder, &sup, inputs, None)?;
            let preds = model::decode(tape, &bound, &sup, &enc.last, horizon, teacher.then_some(targets))?;
            frame_loss(tape, &preds, targets)
        }
        Objective::Auxiliary { lambda, half } => {
            let horizon = cfg.decoder_horizon().expect("auxiliary model has a decoder");
            let bound = model.bind(tape)?;
            let sup = Supports::new(tape, cfg.conv_kind, cfg.k, ops)?;
            let enc = model::encode(tape, &bound.encoder, &sup, inputs, Some(half))?;
            let z = model::head(tape, &bound, cfg, *enc.last.last().unwrap(), inputs.len(), dropout)?;
            let det = tape.bce_with_logits(z, &detect_targets(inputs)?)?;
            let snap = enc.snapshot.expect("snapshot requested");
            let preds = model::decode(tape, &bound, &sup, &snap, horizon, teacher.then_some(targets))?;
            let ss = frame_loss(tape, &preds, targets)?;
            let ss = tape.scale(ss, lambda);
            tape.add(det, ss)
        }
    }
}

/// Mean validation loss, weighted by batch size.
fn validation_loss(
    model: &Model,
    objective: Objective,
    val: &[Example],
    graphs: &ClipGraphs,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, chunk) in val.chunks(batch_size).enumerate() {
        let inputs: Vec<&EegClip> = chunk.iter().map(|e| e.input).collect();
        let targets: Vec<&EegClip> = chunk.iter().filter_map(|e| e.target).collect();
        let ops: Vec<&GraphOperators> = (0..chunk.len()).map(|k| graphs.get(b * batch_size + k)).collect();
        let mut tape = Tape::no_grad();
        let l = batch_loss(&mut tape, model, objective, &inputs, &targets, &ops, false, None)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

struct Fit {
    model: Model,
    report: TrainReport,
}

#[allow(clippy::too_many_arguments)]
fn fit(
    mut model: Model,
    objective: Objective,
    train: &[Example],
    train_graphs: &ClipGraphs,
    source: &GraphSource,
    val: &[Example],
    val_graphs: &ClipGraphs,
    config: &TrainConfig,
    opts: TrainOptions,
) -> Result<Fit> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::NoData("training and validation sets must be nonempty".into()));
    }
    if let Some(init) = opts.init {
        model.load_encoder_from(init)?;
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs_max * steps_per_epoch;
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.params.clone();
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout, 0);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        n_train: train.len(),
        n_val: val.len(),
        class_counts: Vec::new(),
        threshold: None,
        detection: None,
        classification: None,
    };
    let mut step = 0;
    for epoch in 0..config.epochs_max {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut lr = config.lr_init;
        for batch in order.chunks(config.batch_size) {
            let augmented: Vec<EegClip> = match opts.augment {
                Some(f) => batch
                    .iter()
                    .map(|&i| {
                        let mut rng =
                            stream_rng(config.seed, Stream::Augment, ((epoch as u64) << 32) | train[i].origin as u64);
                        f(train[i].origin, &mut rng)
                    })
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let inputs: Vec<&EegClip> = if augmented.is_empty() {
                batch.iter().map(|&i| train[i].input).collect()
            } else {
                augmented.iter().collect()
            };
            // auxiliary targets follow the (possibly augmented) input
            let sliced: Vec<EegClip> = match objective {
                Objective::Auxiliary { half, .. } if !augmented.is_empty() => {
                    augmented.iter().map(|c| sub_clip(c, half, c.n_steps - half)).collect::<Result<_>>()?
                }
                _ => Vec::new(),
            };
            let targets: Vec<&EegClip> = if sliced.is_empty() {
                batch.iter().filter_map(|&i| train[i].target).collect()
            } else {
                sliced.iter().collect()
            };
            let fresh: Vec<Cow<GraphOperators>> = if augmented.is_empty() {
                Vec::new()
            } else {
                inputs.iter().map(|c| source.for_clip(c)).collect::<Result<_>>()?
            };
            let ops: Vec<&GraphOperators> = if fresh.is_empty() {
                batch.iter().map(|&i| train_graphs.get(i)).collect()
            } else {
                fresh.iter().map(|c| c.as_ref()).collect()
            };
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &model, objective, &inputs, &targets, &ops, true, Some(&mut dropout_rng))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_loss += value * batch.len() as f64;
            let grads = tape.backward(loss, model.params.len())?;
            lr = cosine_lr(step, total_steps, config.lr_init, config.lr_min);
            adam_step(&mut model.params, &grads, &mut adam, lr)?;
            step += 1;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = validation_loss(&model, objective, val, val_graphs, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        let (improved, stop) = stopper.update(val_loss);
        if improved {
            best = model.params.clone();
        }
        if let Some(p) = opts.progress {
            p(&EpochStats { epoch: epoch + 1, train_loss, val_loss, lr }, &model);
        }
        if stop && epoch + 1 < config.epochs_max {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch;
    report.best_val_loss = stopper.best;
    model.params = best;
    Ok(Fit { model, report })
}

fn examples(clips: &[EegClip]) -> Vec<Example<'_>> {
    clips.iter().enumerate().map(|(origin, input)| Example { input, target: None, origin }).collect()
}

fn inputs<'a>(ex: &[Example<'a>]) -> Vec<&'a EegClip> {
    ex.iter().map(|e| e.input).collect()
}

/// Keeps `min(P, Neg)` clips of each class, chosen without replacement.
pub fn undersample_indices(labels: &[bool], seed: u64) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let keep = pos.len().min(neg.len());
    let mut rng = stream_rng(seed, Stream::Undersample, 0);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut out: Vec<usize> = pos[..keep].iter().chain(&neg[..keep]).copied().collect();
    out.sort_unstable();
    out
}

fn detection_labels(clips: &[EegClip]) -> Result<Vec<bool>> {
    let refs: Vec<&EegClip> = clips.iter().collect();
    Ok(detect_targets(&refs)?.into_iter().map(|y| y == 1.0).collect())
}

/// Logits of every clip, `[clips, outputs]` row-major, in evaluation mode.
pub fn predict_logits(model: &Model, clips: &[&EegClip], graphs: &ClipGraphs, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(clips.len() * model.config.head_outputs());
    for (b, chunk) in clips.chunks(batch_size.max(1)).enumerate() {
        let ops: Vec<&GraphOperators> = (0..chunk.len()).map(|k| graphs.get(b * batch_size + k)).collect();
        out.extend(model.predict(chunk, &ops)?);
    }
    Ok(out)
}

/// Seizure probabilities of detection clips.
pub fn predict_probs(model: &Model, clips: &[&EegClip], graphs: &ClipGraphs, batch_size: usize) -> Result<Vec<f64>> {
    Ok(predict_logits(model, clips, graphs, batch_size)?.into_iter().map(sigmoid).collect())
}

fn check_task(model_config: &ModelConfig, want: &str, ok: bool) -> Result<()> {
    model_config.validate()?;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("model task {:?} is not {want}", model_config.task)))
    }
}

/// Binary detection training. Clips carry label 0 or 1.
pub fn train_detection(
    train: &[EegClip],
    val: &[EegClip],
    graphs: &GraphSource,
    model_config: ModelConfig,
    config: &TrainConfig,
    opts: TrainOptions,
) -> Result<(Model, TrainReport)> {
    check_task(&model_config, "detection", model_config.task == Task::Detect)?;
    detection_run(train, val, graphs, model_config, config, opts, None)
}

/// Detection with the loss `L_det + λ · L_next`, where the decoder predicts
/// the second half of each clip from the encoder state after the first.
pub fn train_auxiliary(
    train: &[EegClip],
    val: &[EegClip],
    graphs: &GraphSource,
    model_config: ModelConfig,
    config: &TrainConfig,
    opts: TrainOptions,
) -> Result<(Model, TrainReport)> {
    let lambda = config.lambda_aux.ok_or_else(|| Error::InvalidArgument("lambda_aux is required".into()))?;
    check_task(&model_config, "detection", model_config.task == Task::Detect)?;
    detection_run(train, val, graphs, model_config, config, opts, Some(lambda))
}

/// Steps `[start, start + len)` of a clip as a clip of its own.
pub fn sub_clip(clip: &EegClip, start: usize, len: usize) -> Result<EegClip> {
    if start + len > clip.n_steps || len == 0 {
        return Err(Error::Shape(format!("steps [{start}, {}) of {}", start + len, clip.n_steps)));
    }
    let s = clip.n_channels * clip.n_features;
    let valid = clip.valid_len.saturating_sub(start).min(len).max(1);
    EegClip::new(
        len,
        clip.n_channels,
        clip.n_features,
        valid,
        clip.features[start * s..(start + len) * s].to_vec(),
        clip.label,
    )
}

fn detection_run(
    train: &[EegClip],
    val: &[EegClip],
    graphs: &GraphSource,
    model_config: ModelConfig,
    config: &TrainConfig,
    opts: TrainOptions,
    lambda: Option<f64>,
) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let labels = detection_labels(train)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoData("no seizure clips in the training set".into()));
    }
    let keep: Vec<usize> =
        if config.undersample { undersample_indices(&labels, config.seed) } else { (0..train.len()).collect() };

    let (objective, train_halves, val_halves) = match lambda {
        None => (Objective::Detect, Vec::new(), Vec::new()),
        Some(lambda) => {
            let t = train.first().ok_or_else(|| Error::NoData("empty training set".into()))?.n_steps;
            let half = t / 2;
            let horizon = t - half;
            if half == 0 || model_config.aux_horizon != Some(horizon) {
                return Err(Error::InvalidArgument(format!(
                    "auxiliary horizon must be {horizon} for {t}-step clips, got {:?}",
                    model_config.aux_horizon
                )));
            }
            let halves = |cs: &[EegClip]| cs.iter().map(|c| sub_clip(c, half, horizon)).collect::<Result<Vec<_>>>();
            (Objective::Auxiliary { lambda, half }, halves(train)?, halves(val)?)
        }
    };
    let train_ex: Vec<Example> =
        keep.iter().map(|&i| Example { input: &train[i], target: train_halves.get(i), origin: i }).collect();
    let mut val_ex = examples(val);
    for (e, h) in val_ex.iter_mut().zip(&val_halves) {
        e.target = Some(h);
    }
    let train_graphs = graphs.prepare(&inputs(&train_ex))?;
    let val_graphs = graphs.prepare(&inputs(&val_ex))?;
    let model = Model::init(model_config, config.seed)?;
    let Fit { model, mut report } =
        fit(model, objective, &train_ex, &train_graphs, graphs, &val_ex, &val_graphs, config, opts)?;

    let kept_pos = keep.iter().filter(|&&i| labels[i]).count();
    report.class_counts = vec![keep.len() - kept_pos, kept_pos];
    let val_labels = detection_labels(val)?;
    let probs = predict_probs(&model, &inputs(&val_ex), &val_graphs, config.batch_size)?;
    if let Ok((thr, _)) = threshold_search(&probs, &val_labels) {
        report.threshold = Some(thr);
        report.detection = Some(evaluation::detection_metrics(&probs, &val_labels, thr)?);
    }
    Ok((model, report))
}

/// Multi-class training with cross-entropy. Clips carry their class index.
pub fn train_classification(
    train: &[EegClip],
    val: &[EegClip],
    graphs: &GraphSource,
    model_config: ModelConfig,
    config: &TrainConfig,
    opts: TrainOptions,
) -> Result<(Model, TrainReport)> {
    let n_classes = match model_config.task {
        Task::Classify { n_classes } => n_classes,
        _ => return check_task(&model_config, "classification", false).map(|_| unreachable!()),
    };
    model_config.validate()?;
    let train_ex = examples(train);
    let val_ex = examples(val);
    let check = |cs: &[EegClip]| -> Result<Vec<usize>> {
        let refs: Vec<&EegClip> = cs.iter().collect();
        let y = class_targets(&refs)?;
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::ClassOutOfRange { index: bad, n_classes });
        }
        Ok(y)
    };
    let train_y = check(train)?;
    let val_y = check(val)?;
    let train_graphs = graphs.prepare(&inputs(&train_ex))?;
    let val_graphs = graphs.prepare(&inputs(&val_ex))?;
    let model = Model::init(model_config, config.seed)?;
    let Fit { model, mut report } =
        fit(model, Objective::Classify, &train_ex, &train_graphs, graphs, &val_ex, &val_graphs, config, opts)?;
    report.class_counts = (0..n_classes).map(|c| train_y.iter().filter(|&&y| y == c).count()).collect();
    let logits = predict_logits(&model, &inputs(&val_ex), &val_graphs, config.batch_size)?;
    let preds = evaluation::argmax_rows(&logits, n_classes);
    report.classification = Some(evaluation::classification_metrics(&preds, &val_y, n_classes)?);
    Ok((model, report))
}

/// Sequence-to-sequence pretraining on `(input, next window)` pairs.
pub fn pretrain_self_supervised(
    train: &[(EegClip, EegClip)],
    val: &[(EegClip, EegClip)],
    graphs: &GraphSource,
    model_config: ModelConfig,
    config: &TrainConfig,
    opts: TrainOptions,
) -> Result<(Model, TrainReport)> {
    check_task(&model_config, "pretraining", matches!(model_config.task, Task::Pretrain { .. }))?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::NoData("no input/target window pairs; recordings are too short".into()));
    }
    fn pairs(ps: &[(EegClip, EegClip)]) -> Vec<Example<'_>> {
        ps.iter().enumerate().map(|(origin, (x, y))| Example { input: x, target: Some(y), origin }).collect()
    }
    let train_ex = pairs(train);
    let val_ex = pairs(val);
    let train_graphs = graphs.prepare(&inputs(&train_ex))?;
    let val_graphs = graphs.prepare(&inputs(&val_ex))?;
    let model = Model::init(model_config, config.seed)?;
    let Fit { model, mut report } =
        fit(model, Objective::Pretrain, &train_ex, &train_graphs, graphs, &val_ex, &val_graphs, config, opts)?;
    report.class_counts = Vec::new();
    Ok((model, report))
}

/// `(L_det, L_next, total)` of one auxiliary batch under teacher forcing,
/// with `halves[b]` the second half of `clips[b]`.
pub fn auxiliary_losses(
    model: &Model,
    clips: &[&EegClip],
    halves: &[&EegClip],
    ops: &[&GraphOperators],
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let half = clips.first().ok_or_else(|| Error::NoData("empty batch".into()))?.n_steps / 2;
    let mut tape = Tape::new();
    let total = batch_loss(&mut tape, model, Objective::Auxiliary { lambda, half }, clips, halves, ops, true, None)?;
    let mut t1 = Tape::new();
    let det = batch_loss(&mut t1, model, Objective::Detect, clips, &[], ops, true, None)?;
    let cfg = &model.config;
    let mut t2 = Tape::new();
    let bound = model.bind(&mut t2)?;
    let sup = Supports::new(&mut t2, cfg.conv_kind, cfg.k, ops)?;
    let enc = model::encode(&mut t2, &bound.encoder, &sup, clips, Some(half))?;
    let horizon = cfg.decoder_horizon().ok_or_else(|| Error::InvalidArgument("model has no decoder".into()))?;
    let preds = model::decode(&mut t2, &bound, &sup, &enc.snapshot.unwrap(), horizon, Some(halves))?;
    let ss = frame_loss(&mut t2, &preds, halves)?;
    Ok((t1.value(det).item(), t2.value(ss).item(), tape.value(total).item()))
}
