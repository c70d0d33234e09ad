//! Occlusion saliency and its agreement with channel-second annotations.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::evaluation::{argmax_rows, Score};
use crate::graph::GraphOperators;
use crate::ingest::AnnotationMask;
use crate::model::{Model, Task};
use crate::preprocess::EegClip;
use crate::training::GraphSource;
use crate::{Error, Result};

/// Cells above this value count as salient.
pub const SALIENT: f64 = 0.5;

/// Channel-major `n_channels × n_steps` saliency, min-max scaled to [0, 1].
/// Classification maps have `n_steps = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMap {
    pub n_channels: usize,
    pub n_steps: usize,
    pub values: Vec<f64>,
    /// Signed `original − occluded` logit changes before scaling.
    pub raw: Vec<f64>,
    /// Set when every raw change is equal; `values` are then all 0.
    pub degenerate: bool,
}

impl OcclusionMap {
    pub fn from_raw(n_channels: usize, n_steps: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != n_channels * n_steps {
            return Err(Error::Shape(format!("{} values for a {n_channels}×{n_steps} map", raw.len())));
        }
        let (values, degenerate) = min_max_scale(&raw);
        Ok(Self { n_channels, n_steps, values, raw, degenerate })
    }

    pub fn get(&self, channel: usize, step: usize) -> f64 {
        self.values[channel * self.n_steps + step]
    }

    /// Time-averaged saliency per channel.
    pub fn channel_means(&self) -> Vec<f64> {
        self.values.chunks(self.n_steps).map(|r| r.iter().sum::<f64>() / self.n_steps as f64).collect()
    }

    /// Cells strictly above [`SALIENT`].
    pub fn salient_mask(&self) -> Vec<u8> {
        self.values.iter().map(|&v| u8::from(v > SALIENT)).collect()
    }
}

/// `(x − min) / (max − min)`; all zeros and `true` when `max = min`.
pub fn min_max_scale(raw: &[f64]) -> (Vec<f64>, bool) {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if raw.is_empty() || !(hi > lo) {
        return (vec![0.0; raw.len()], true);
    }
    (raw.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionOptions {
    /// Keep the graph of the unoccluded clip instead of rebuilding it.
    pub freeze_graph: bool,
    pub batch_size: usize,
}

impl Default for OcclusionOptions {
    fn default() -> Self {
        Self { freeze_graph: false, batch_size: 32 }
    }
}

/// Logits of `clips`, each with its own graph unless frozen to `frozen`.
fn logits_of(
    model: &Model,
    clips: &[EegClip],
    graphs: &GraphSource,
    frozen: Option<&GraphOperators>,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in clips.chunks(batch_size.max(1)) {
        let ops: Vec<Cow<GraphOperators>> = chunk
            .iter()
            .map(|c| match frozen {
                Some(g) => Ok(Cow::Borrowed(g)),
                None => graphs.for_clip(c),
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&GraphOperators> = ops.iter().map(|c| c.as_ref()).collect();
        let batch: Vec<&EegClip> = chunk.iter().collect();
        out.extend(model.predict(&batch, &refs)?);
    }
    Ok(out)
}

fn frozen_graph<'a>(
    clip: &EegClip,
    graphs: &'a GraphSource,
    opts: &OcclusionOptions,
) -> Result<Option<Cow<'a, GraphOperators>>> {
    if opts.freeze_graph {
        graphs.for_clip(clip).map(Some)
    } else {
        Ok(None)
    }
}

/// Zeroes each (channel, second) feature row of a detection clip in turn
/// and records the drop of the seizure logit. Padded steps score 0.
pub fn occlusion_detect(
    model: &Model,
    clip: &EegClip,
    graphs: &GraphSource,
    opts: &OcclusionOptions,
) -> Result<OcclusionMap> {
    if model.config.task != Task::Detect {
        return Err(Error::InvalidArgument("occlusion_detect needs a detection model".into()));
    }
    let frozen = frozen_graph(clip, graphs, opts)?;
    let frozen = frozen.as_deref();
    let original = logits_of(model, core::slice::from_ref(clip), graphs, frozen, 1)?[0];
    let (n, t) = (clip.n_channels, clip.n_steps);
    let mut occluded = Vec::with_capacity(n * clip.valid_len);
    let mut cells = Vec::with_capacity(n * clip.valid_len);
    for ch in 0..n {
        for s in 0..clip.valid_len {
            let mut c = clip.clone();
            c.row_mut(s, ch).iter_mut().for_each(|v| *v = 0.0);
            occluded.push(c);
            cells.push(ch * t + s);
        }
    }
    let logits = logits_of(model, &occluded, graphs, frozen, opts.batch_size)?;
    let mut raw = vec![0.0; n * t];
    for (cell, z) in cells.into_iter().zip(logits) {
        raw[cell] = original - z;
    }
    OcclusionMap::from_raw(n, t, raw)
}

/// Drops each channel of a classification clip in turn and records the
/// drop of the logit of the originally predicted class.
pub fn occlusion_classify(
    model: &Model,
    clip: &EegClip,
    graphs: &GraphSource,
    opts: &OcclusionOptions,
) -> Result<OcclusionMap> {
    let n_classes = match model.config.task {
        Task::Classify { n_classes } => n_classes,
        _ => return Err(Error::InvalidArgument("occlusion_classify needs a classification model".into())),
    };
    let frozen = frozen_graph(clip, graphs, opts)?;
    let frozen = frozen.as_deref();
    let original = logits_of(model, core::slice::from_ref(clip), graphs, frozen, 1)?;
    let class = argmax_rows(&original, n_classes)[0];
    let n = clip.n_channels;
    let occluded: Vec<EegClip> = (0..n)
        .map(|ch| {
            let mut c = clip.clone();
            for s in 0..c.n_steps {
                c.row_mut(s, ch).iter_mut().for_each(|v| *v = 0.0);
            }
            c
        })
        .collect();
    let logits = logits_of(model, &occluded, graphs, frozen, opts.batch_size)?;
    let raw = (0..n).map(|ch| original[class] - logits[ch * n_classes + class]).collect();
    OcclusionMap::from_raw(n, 1, raw)
}

fn check_pair(values: &[f64], annot: &[u8]) -> Result<()> {
    if values.len() != annot.len() {
        return Err(Error::Shape(format!("map of {} cells, annotation of {}", values.len(), annot.len())));
    }
    Ok(())
}

/// Fraction of annotated cells that are salient.
pub fn coverage_values(values: &[f64], annot: &[u8]) -> Result<f64> {
    check_pair(values, annot)?;
    let annotated = annot.iter().filter(|&&a| a != 0).count();
    if annotated == 0 {
        return Err(Error::NoData("annotation mask is empty".into()));
    }
    let hit = values.iter().zip(annot).filter(|(&v, &a)| v > SALIENT && a != 0).count();
    Ok(hit as f64 / annotated as f64)
}

/// Fraction of salient cells that are annotated; 0 and degenerate when no
/// cell is salient.
pub fn localization_values(values: &[f64], annot: &[u8]) -> Result<Score> {
    check_pair(values, annot)?;
    let salient = values.iter().filter(|&&v| v > SALIENT).count();
    if salient == 0 {
        return Ok(Score { value: 0.0, degenerate: true });
    }
    let hit = values.iter().zip(annot).filter(|(&v, &a)| v > SALIENT && a != 0).count();
    Ok(Score { value: hit as f64 / salient as f64, degenerate: false })
}

fn check_dims(map: &OcclusionMap, annot: &AnnotationMask) -> Result<()> {
    if map.n_channels != annot.n_channels || map.n_steps != annot.n_seconds {
        return Err(Error::Shape(format!(
            "{}×{} map against a {}×{} annotation",
            map.n_channels, map.n_steps, annot.n_channels, annot.n_seconds
        )));
    }
    Ok(())
}

pub fn coverage(map: &OcclusionMap, annot: &AnnotationMask) -> Result<f64> {
    check_dims(map, annot)?;
    coverage_values(&map.values, &annot.grid)
}

pub fn localization(map: &OcclusionMap, annot: &AnnotationMask) -> Result<Score> {
    check_dims(map, annot)?;
    localization_values(&map.values, &annot.grid)
}

/// Histogram and summary of per-clip scores in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    pub n: usize,
    /// Counts over equal-width bins of [0, 1]; 1.0 falls in the last bin.
    pub histogram: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    /// Fraction of scores strictly above 0.8.
    pub fraction_above_0_8: f64,
}

pub fn score_distribution(scores: &[f64], n_bins: usize) -> ScoreDistribution {
    let n_bins = n_bins.max(1);
    let mut histogram = vec![0; n_bins];
    for &s in scores {
        let b = ((s.clamp(0.0, 1.0) * n_bins as f64) as usize).min(n_bins - 1);
        histogram[b] += 1;
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = match n {
        0 => 0.0,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    let nf = n.max(1) as f64;
    ScoreDistribution {
        n,
        histogram,
        mean: scores.iter().sum::<f64>() / nf,
        median,
        fraction_above_0_8: scores.iter().filter(|&&s| s > 0.8).count() as f64 / nf,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub coverage: ScoreDistribution,
    pub localization: ScoreDistribution,
    /// Clips whose map had no salient cell.
    pub n_without_salient: usize,
    pub n_degenerate_maps: usize,
}

/// Coverage and localization distributions over clips with a nonempty
/// annotation.
pub fn summarize(pairs: &[(&OcclusionMap, &AnnotationMask)], n_bins: usize) -> Result<LocalizationSummary> {
    let mut cov = Vec::new();
    let mut loc = Vec::new();
    let mut empty = 0;
    let mut degenerate = 0;
    for (map, annot) in pairs {
        if annot.count() == 0 {
            continue;
        }
        cov.push(coverage(map, annot)?);
        let l = localization(map, annot)?;
        empty += usize::from(l.degenerate);
        degenerate += usize::from(map.degenerate);
        loc.push(l.value);
    }
    Ok(LocalizationSummary {
        coverage: score_distribution(&cov, n_bins),
        localization: score_distribution(&loc, n_bins),
        n_without_salient: empty,
        n_degenerate_maps: degenerate,
    })
}

/// What an overlay export carries besides the rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub channels: Vec<String>,
    pub n_steps: usize,
    /// Channel-major grid of normalized saliency.
    pub grid: Vec<f64>,
    pub salient: Vec<u8>,
    pub channel_means: Vec<f64>,
    pub degenerate: bool,
}

impl Overlay {
    pub fn new(map: &OcclusionMap, channels: &[String]) -> Result<Self> {
        if channels.len() != map.n_channels {
            return Err(Error::Shape(format!("{} names for {} channels", channels.len(), map.n_channels)));
        }
        Ok(Self {
            channels: channels.to_vec(),
            n_steps: map.n_steps,
            grid: map.values.clone(),
            salient: map.salient_mask(),
            channel_means: map.channel_means(),
            degenerate: map.degenerate,
        })
    }
}
