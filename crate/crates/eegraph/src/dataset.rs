//! Recordings to normalized clip sets, split by recording.

use std::collections::BTreeMap;

use eegraph_core::ingest::{annotation_mask, AnnotationMask, RawWindow, Recording};
use eegraph_core::preprocess::{
    apply_norm, augment_midline_reflect, augment_scale, classification_clip, detection_clips, fit_norm_stats,
    pretrain_pairs, ClipSource, ClipWindow, EegClip, NormStats, SpectralFeaturizer, N_FEATURES,
};
use eegraph_core::rng::{stream_rng, Stream};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::container::resample_recording;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClipTask {
    Detect,
    Classify,
    Pretrain,
}

/// One preprocessed example.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip: EegClip,
    /// Next-window target of a pretraining pair.
    pub target: Option<EegClip>,
    pub split: Split,
    /// Channel × second mask for detection, channel × 1 for classification.
    pub annotation: Option<AnnotationMask>,
}

/// Clips of one task with the statistics they were normalized with.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub task: ClipTask,
    pub channels: Vec<String>,
    pub clip_len: usize,
    pub horizon: Option<usize>,
    pub n_classes: Option<usize>,
    pub stats: NormStats,
    /// Where the source recordings live, for augmentation.
    pub recordings: Option<String>,
    pub clips: Vec<ClipRecord>,
}

impl ClipSet {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn inputs(&self, split: Split) -> Vec<EegClip> {
        self.split(split).map(|c| c.clip.clone()).collect()
    }

    /// `(input, target)` pairs of a pretraining set.
    pub fn pairs(&self, split: Split) -> Vec<(EegClip, EegClip)> {
        self.split(split).filter_map(|c| Some((c.clip.clone(), c.target.clone()?))).collect()
    }
}

/// Seeded recording-level split: a shuffled order cut at the train and
/// validation fractions.
pub fn split_recordings(n: usize, data: &DataConfig, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let n_train = (data.train_fraction * n as f64).round() as usize;
    let n_val = ((data.val_fraction * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            out[i] = Split::Train;
        } else if rank < n_train + n_val {
            out[i] = Split::Val;
        }
    }
    out
}

/// Collapses a channel × second mask to channel involvement.
pub fn channel_annotation(mask: &AnnotationMask) -> AnnotationMask {
    let grid = (0..mask.n_channels).map(|i| u8::from((0..mask.n_seconds).any(|j| mask.get(i, j) != 0))).collect();
    AnnotationMask { n_channels: mask.n_channels, n_seconds: 1, grid }
}

/// Annotation over `clip_len` seconds of which only the first `valid` lie
/// inside the recording.
fn padded_annotation(rec: &Recording, w: &ClipWindow) -> Result<AnnotationMask> {
    let inner = annotation_mask(rec, w.start_sec, w.valid_sec as f64)?;
    let mut grid = vec![0u8; rec.n_channels() * w.clip_len];
    for i in 0..rec.n_channels() {
        for j in 0..w.valid_sec {
            grid[i * w.clip_len + j] = inner.get(i, j);
        }
    }
    Ok(AnnotationMask { n_channels: rec.n_channels(), n_seconds: w.clip_len, grid })
}

fn featurizer(rate: f64) -> Result<SpectralFeaturizer> {
    let step = rate.round() as usize;
    if (rate - step as f64).abs() > 1e-9 {
        return Err(Error::Config(format!("sample rate {rate} Hz is not a whole number of samples per second")));
    }
    Ok(SpectralFeaturizer::new(step, N_FEATURES)?)
}

fn source(rec: &Recording, w: &ClipWindow) -> ClipSource {
    ClipSource { recording: rec.id.clone(), start_sec: w.start_sec, len_sec: w.valid_sec as f64 }
}

/// Unnormalized features of a window, padded to its clip length.
fn window_clip(
    fz: &SpectralFeaturizer,
    raw: &RawWindow,
    rec: &Recording,
    w: &ClipWindow,
    label: Option<usize>,
) -> Result<EegClip> {
    Ok(fz.clip(raw, w.clip_len, label)?.with_source(source(rec, w)))
}

fn recording_clips(
    rec: &Recording,
    task: ClipTask,
    data: &DataConfig,
    fz: &SpectralFeaturizer,
    split: Split,
) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    match task {
        ClipTask::Detect => {
            for (w, seizure) in detection_clips(rec, data.clip_len) {
                let raw = rec.window(w.start_sec, w.valid_sec as f64)?;
                out.push(ClipRecord {
                    clip: window_clip(fz, &raw, rec, &w, Some(usize::from(seizure)))?,
                    target: None,
                    split,
                    annotation: Some(padded_annotation(rec, &w)?),
                });
            }
        }
        ClipTask::Classify => {
            for ev in &rec.annotations {
                let Some((w, class)) = classification_clip(rec, ev, data.clip_len, &data.remap)? else { continue };
                let raw = rec.window(w.start_sec, w.valid_sec as f64)?;
                out.push(ClipRecord {
                    clip: window_clip(fz, &raw, rec, &w, Some(class))?,
                    target: None,
                    split,
                    annotation: Some(channel_annotation(&padded_annotation(rec, &w)?)),
                });
            }
        }
        ClipTask::Pretrain => {
            for (wi, wt) in pretrain_pairs(rec, data.clip_len, data.horizon) {
                let x = rec.window(wi.start_sec, wi.valid_sec as f64)?;
                let y = rec.window(wt.start_sec, wt.valid_sec as f64)?;
                out.push(ClipRecord {
                    clip: window_clip(fz, &x, rec, &wi, None)?,
                    target: Some(window_clip(fz, &y, rec, &wt, None)?),
                    split,
                    annotation: None,
                });
            }
        }
    }
    Ok(out)
}

/// Resamples, windows, featurizes and normalizes a corpus. Statistics are
/// fit on the training split unless `stats` is given.
pub fn build_clip_set(
    recs: &[Recording],
    task: ClipTask,
    data: &DataConfig,
    seed: u64,
    stats: Option<NormStats>,
) -> Result<ClipSet> {
    let first = recs.first().ok_or_else(|| Error::Usage("no recordings".into()))?;
    let channels = first.channels.clone();
    if let Some(r) = recs.iter().find(|r| r.channels != channels) {
        return Err(Error::Config(format!("recording {} has a different channel set", r.id)));
    }
    let fz = featurizer(data.sample_rate)?;
    let splits = split_recordings(recs.len(), data, seed);
    let per_rec: Vec<Vec<ClipRecord>> = recs
        .par_iter()
        .zip(splits.par_iter())
        .map(|(rec, &split)| {
            let resampled;
            let rec = if rec.sample_rate == data.sample_rate {
                rec
            } else {
                resampled = resample_recording(rec, data.sample_rate)?;
                &resampled
            };
            recording_clips(rec, task, data, &fz, split)
        })
        .collect::<Result<_>>()?;
    let mut clips: Vec<ClipRecord> = per_rec.into_iter().flatten().collect();
    let stats = match stats {
        Some(s) => s,
        None => {
            let train: Vec<EegClip> =
                clips.iter().filter(|c| c.split == Split::Train).map(|c| c.clip.clone()).collect();
            fit_norm_stats(&train)?
        }
    };
    clips.par_iter_mut().try_for_each(|c| -> Result<()> {
        c.clip = apply_norm(&c.clip, &stats)?;
        if let Some(t) = &c.target {
            c.target = Some(apply_norm(t, &stats)?);
        }
        Ok(())
    })?;
    Ok(ClipSet {
        task,
        channels,
        clip_len: data.clip_len,
        horizon: (task == ClipTask::Pretrain).then_some(data.horizon),
        n_classes: (task == ClipTask::Classify).then(|| data.remap.n_classes()),
        stats,
        recordings: None,
        clips,
    })
}

/// Re-featurizes training clips from their raw windows after amplitude
/// scaling and then midline reflection.
pub struct Augmenter<'a> {
    recordings: BTreeMap<&'a str, &'a Recording>,
    channels: &'a [String],
    featurizer: SpectralFeaturizer,
    stats: &'a NormStats,
    clip_len: usize,
}

impl<'a> Augmenter<'a> {
    pub fn new(recs: &'a [Recording], set: &'a ClipSet, rate: f64) -> Result<Self> {
        if recs.iter().any(|r| r.sample_rate != rate) {
            return Err(Error::Config("augmentation needs recordings at the clip sample rate".into()));
        }
        Ok(Self {
            recordings: recs.iter().map(|r| (r.id.as_str(), r)).collect(),
            channels: &set.channels,
            featurizer: featurizer(rate)?,
            stats: &set.stats,
            clip_len: set.clip_len,
        })
    }

    /// A fresh augmented version of `clip`.
    pub fn augment(&self, clip: &EegClip, rng: &mut ChaCha8Rng) -> Result<EegClip> {
        let src = &clip.source;
        let rec = self
            .recordings
            .get(src.recording.as_str())
            .ok_or_else(|| Error::Usage(format!("recording {} not available for augmentation", src.recording)))?;
        let mut raw = rec.window(src.start_sec, src.len_sec)?;
        augment_scale(&mut raw, rng);
        augment_midline_reflect(&mut raw, self.channels, rng)?;
        let fresh = self.featurizer.clip(&raw, self.clip_len, clip.label)?.with_source(src.clone());
        Ok(apply_norm(&fresh, self.stats)?)
    }
}
