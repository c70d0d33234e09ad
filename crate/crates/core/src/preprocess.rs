//! Clip windowing, log-amplitude spectral features, z-normalization,
//! seizure-class remapping and raw-signal augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{RawWindow, Recording, SeizureEvent};
use crate::{Error, Result};

/// Frequency features kept per channel and second.
pub const N_FEATURES: usize = 100;
/// Lower clamp applied to amplitudes before the logarithm.
pub const LOG_FLOOR: f64 = 1e-7;
/// Seconds kept before a seizure onset when cutting classification clips.
pub const ONSET_OFFSET_SEC: f64 = 2.0;

/// Where a clip came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipSource {
    pub recording: String,
    pub start_sec: f64,
    pub len_sec: f64,
}

/// A preprocessed clip: `T × N × M` features stored time-major, zero rows
/// past `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct EegClip {
    pub n_steps: usize,
    pub n_channels: usize,
    pub n_features: usize,
    pub valid_len: usize,
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub source: ClipSource,
}

impl EegClip {
    pub fn new(
        n_steps: usize,
        n_channels: usize,
        n_features: usize,
        valid_len: usize,
        features: Vec<f64>,
        label: Option<usize>,
    ) -> Result<Self> {
        if features.len() != n_steps * n_channels * n_features {
            return Err(Error::Shape(format!(
                "{} values for a {n_steps}×{n_channels}×{n_features} clip",
                features.len()
            )));
        }
        if valid_len == 0 || valid_len > n_steps {
            return Err(Error::InvalidArgument(format!("valid length {valid_len} of {n_steps} steps")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("clip features"));
        }
        let mut clip =
            Self { n_steps, n_channels, n_features, valid_len, features, label, source: ClipSource::default() };
        clip.zero_padding();
        Ok(clip)
    }

    pub fn with_source(mut self, source: ClipSource) -> Self {
        self.source = source;
        self
    }

    pub fn step(&self, t: usize) -> &[f64] {
        let s = self.n_channels * self.n_features;
        &self.features[t * s..(t + 1) * s]
    }

    pub fn row(&self, t: usize, channel: usize) -> &[f64] {
        let m = self.n_features;
        let off = (t * self.n_channels + channel) * m;
        &self.features[off..off + m]
    }

    pub fn row_mut(&mut self, t: usize, channel: usize) -> &mut [f64] {
        let m = self.n_features;
        let off = (t * self.n_channels + channel) * m;
        &mut self.features[off..off + m]
    }

    fn zero_padding(&mut self) {
        let s = self.n_channels * self.n_features;
        self.features[self.valid_len * s..].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Channel-relabeled copy: channel `i` of the result is channel
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for t in 0..self.n_steps {
            for (i, &src) in perm.iter().enumerate() {
                out.row_mut(t, i).copy_from_slice(self.row(t, src));
            }
        }
        out
    }
}

/// A clip window within one recording, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipWindow {
    pub start_sec: f64,
    /// Unpadded length in whole seconds.
    pub valid_sec: usize,
    /// Padded clip length in seconds.
    pub clip_len: usize,
}

/// Non-overlapping detection windows; a trailing partial window is dropped.
/// The label is set when any event overlaps the window.
pub fn detection_clips(rec: &Recording, clip_len_sec: usize) -> Vec<(ClipWindow, bool)> {
    if clip_len_sec == 0 {
        return Vec::new();
    }
    let count = (rec.duration_sec() / clip_len_sec as f64 + 1e-9).floor() as usize;
    (0..count)
        .map(|k| {
            let start = (k * clip_len_sec) as f64;
            let end = start + clip_len_sec as f64;
            let label = rec.annotations.iter().any(|ev| ev.overlaps(start, end));
            (ClipWindow { start_sec: start, valid_sec: clip_len_sec, clip_len: clip_len_sec }, label)
        })
        .collect()
}

/// Input/target window pairs for next-period prediction: input
/// `[kL, (k+1)L)` and target `[(k+1)L, (k+1)L + horizon)`.
pub fn pretrain_pairs(rec: &Recording, clip_len_sec: usize, horizon_sec: usize) -> Vec<(ClipWindow, ClipWindow)> {
    let duration = rec.duration_sec() + 1e-9;
    let mut out = Vec::new();
    let mut k = 0;
    while ((k + 1) * clip_len_sec + horizon_sec) as f64 <= duration && clip_len_sec > 0 {
        let start = (k * clip_len_sec) as f64;
        out.push((
            ClipWindow { start_sec: start, valid_sec: clip_len_sec, clip_len: clip_len_sec },
            ClipWindow { start_sec: start + clip_len_sec as f64, valid_sec: horizon_sec, clip_len: horizon_sec },
        ));
        k += 1;
    }
    out
}

/// Raw seizure label → class index, plus labels to skip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRemap {
    pub map: BTreeMap<String, usize>,
    #[serde(default)]
    pub drop: Vec<String>,
}

impl LabelRemap {
    /// Four classes: combined focal (FN, SP, CP), generalized non-specific,
    /// absence, combined tonic (TN, TC); myoclonic dropped.
    pub fn four_class() -> Self {
        let map = [("FNSZ", 0), ("SPSZ", 0), ("CPSZ", 0), ("GNSZ", 1), ("ABSZ", 2), ("TNSZ", 3), ("TCSZ", 3)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self { map, drop: vec!["MYSZ".to_string()] }
    }

    /// Every label of the corpus as its own class.
    pub fn eight_class() -> Self {
        let map = ["FNSZ", "GNSZ", "SPSZ", "CPSZ", "ABSZ", "TNSZ", "TCSZ", "MYSZ"]
            .into_iter()
            .enumerate()
            .map(|(i, k)| (k.to_string(), i))
            .collect();
        Self { map, drop: Vec::new() }
    }

    pub fn n_classes(&self) -> usize {
        self.map.values().max().map_or(0, |m| m + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_classes();
        for c in 0..n {
            if !self.map.values().any(|&v| v == c) {
                return Err(Error::InvalidArgument(format!("class indices are not contiguous: {c} missing")));
            }
        }
        Ok(())
    }

    /// Class of `label`; `None` when the label is dropped or unmapped.
    pub fn class_of(&self, label: &str) -> Option<usize> {
        if self.drop.iter().any(|d| d == label) {
            return None;
        }
        self.map.get(label).copied()
    }
}

/// Window of the classification clip for `event`: starts two seconds before
/// onset (clamped at 0) and is cut at the event offset when the seizure is
/// shorter than the clip. Returns `None` for dropped labels.
pub fn classification_clip(
    rec: &Recording,
    event: &SeizureEvent,
    clip_len_sec: usize,
    remap: &LabelRemap,
) -> Result<Option<(ClipWindow, usize)>> {
    crate::ingest::validate_event(event, rec.duration_sec(), rec.n_channels())?;
    let Some(class) = remap.class_of(&event.class_label) else {
        return Ok(None);
    };
    let start = (event.onset_sec - ONSET_OFFSET_SEC).max(0.0);
    let end = (start + clip_len_sec as f64).min(event.offset_sec).min(rec.duration_sec());
    let valid = ((end - start) + 1e-9).floor() as usize;
    if valid == 0 {
        return Ok(None);
    }
    Ok(Some((ClipWindow { start_sec: start, valid_sec: valid, clip_len: clip_len_sec }, class)))
}

/// Precomputed DFT basis for the kept bins of one step.
#[derive(Debug, Clone)]
pub struct SpectralFeaturizer {
    step_samples: usize,
    n_bins: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl SpectralFeaturizer {
    /// Basis for `step_samples`-sample steps keeping bins `0..n_bins`.
    pub fn new(step_samples: usize, n_bins: usize) -> Result<Self> {
        if step_samples == 0 || n_bins > step_samples / 2 + 1 {
            return Err(Error::InvalidArgument(format!("{n_bins} non-negative bins from {step_samples}-sample steps")));
        }
        let mut cos = vec![0.0; n_bins * step_samples];
        let mut sin = vec![0.0; n_bins * step_samples];
        for k in 0..n_bins {
            for s in 0..step_samples {
                // exact phase reduction keeps the table accurate for large k·s
                let r = (k * s) % step_samples;
                let a = 2.0 * PI * r as f64 / step_samples as f64;
                cos[k * step_samples + s] = a.cos();
                sin[k * step_samples + s] = a.sin();
            }
        }
        Ok(Self { step_samples, n_bins, cos, sin })
    }

    /// One second at 200 Hz, 100 kept bins.
    pub fn standard() -> Self {
        Self::new(200, N_FEATURES).expect("valid standard basis")
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Amplitude spectrum `|Σ x[s] e^{−2πi k s / S}|` of the kept bins.
    pub fn amplitudes(&self, x: &[f64]) -> Vec<f64> {
        let s = self.step_samples;
        (0..self.n_bins)
            .map(|k| {
                let (c, sn) = (&self.cos[k * s..(k + 1) * s], &self.sin[k * s..(k + 1) * s]);
                let re: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
                let im: f64 = x.iter().zip(sn).map(|(a, b)| a * b).sum();
                re.hypot(im)
            })
            .collect()
    }

    /// `T × N × M` log-amplitude features of a raw window whose length is a
    /// whole number of steps.
    pub fn log_features(&self, window: &RawWindow) -> Result<Vec<f64>> {
        if window.n_samples % self.step_samples != 0 || window.n_samples == 0 {
            return Err(Error::Shape(format!(
                "{} samples is not a multiple of the {}-sample step",
                window.n_samples, self.step_samples
            )));
        }
        let steps = window.n_samples / self.step_samples;
        let n = window.n_channels;
        let mut out = vec![0.0; steps * n * self.n_bins];
        for t in 0..steps {
            for c in 0..n {
                let seg = &window.channel(c)[t * self.step_samples..(t + 1) * self.step_samples];
                let off = (t * n + c) * self.n_bins;
                for (o, a) in out[off..off + self.n_bins].iter_mut().zip(self.amplitudes(seg)) {
                    *o = a.max(LOG_FLOOR).ln();
                }
            }
        }
        Ok(out)
    }

    /// Features of `window` zero-padded to `clip_len` steps.
    pub fn clip(&self, window: &RawWindow, clip_len: usize, label: Option<usize>) -> Result<EegClip> {
        let feats = self.log_features(window)?;
        let steps = window.n_samples / self.step_samples;
        if steps > clip_len {
            return Err(Error::Shape(format!("{steps} steps exceed clip length {clip_len}")));
        }
        let mut full = vec![0.0; clip_len * window.n_channels * self.n_bins];
        full[..feats.len()].copy_from_slice(&feats);
        EegClip::new(clip_len, window.n_channels, self.n_bins, steps, full, label)
    }
}

/// Per-feature-index z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Mean and population standard deviation of every feature index over the
/// valid rows of all clips, in a fixed summation order.
pub fn fit_norm_stats(clips: &[EegClip]) -> Result<NormStats> {
    let first = clips.first().ok_or_else(|| Error::NoData("no clips to fit normalization on".into()))?;
    let m = first.n_features;
    let mut sum = vec![0.0; m];
    let mut count = 0usize;
    for clip in clips {
        if clip.n_features != m {
            return Err(Error::Shape("clips disagree on feature count".into()));
        }
        for t in 0..clip.valid_len {
            for i in 0..clip.n_channels {
                for (s, v) in sum.iter_mut().zip(clip.row(t, i)) {
                    *s += v;
                }
            }
            count += clip.n_channels;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; m];
    for clip in clips {
        for t in 0..clip.valid_len {
            for i in 0..clip.n_channels {
                for ((s, v), mu) in sq.iter_mut().zip(clip.row(t, i)).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
        }
    }
    let std: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    if let Some(index) = std.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateStats { index });
    }
    Ok(NormStats { mean, std })
}

/// Z-normalizes the valid rows of `clip`; padding stays zero.
pub fn apply_norm(clip: &EegClip, stats: &NormStats) -> Result<EegClip> {
    if stats.mean.len() != clip.n_features || stats.std.len() != clip.n_features {
        return Err(Error::Shape("normalization stats do not match the feature count".into()));
    }
    let mut out = clip.clone();
    for t in 0..clip.valid_len {
        for i in 0..clip.n_channels {
            for ((v, mu), sd) in out.row_mut(t, i).iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - mu) / sd;
            }
        }
    }
    Ok(out)
}

/// Scales the whole raw window by one factor drawn from `[0.8, 1.2]`;
/// returns the factor.
pub fn augment_scale<R: Rng + ?Sized>(window: &mut RawWindow, rng: &mut R) -> f64 {
    let s = rng.random_range(0.8..=1.2);
    window.data.iter_mut().for_each(|v| *v *= s);
    s
}

const HOMOLOGOUS: [(&str, &str); 9] = [
    ("Fp1", "Fp2"),
    ("F3", "F4"),
    ("F7", "F8"),
    ("C3", "C4"),
    ("T3", "T4"),
    ("P3", "P4"),
    ("T5", "T6"),
    ("O1", "O2"),
    ("A1", "A2"),
];
const MIDLINE: [&str; 3] = ["Fz", "Cz", "Pz"];

/// Permutation that mirrors channels across the scalp midline:
/// `perm[i]` is the homologous partner of channel `i` (itself on the
/// midline).
pub fn midline_permutation(channels: &[String]) -> Result<Vec<usize>> {
    let find = |name: &str| channels.iter().position(|c| c.eq_ignore_ascii_case(name));
    channels
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if MIDLINE.iter().any(|m| m.eq_ignore_ascii_case(c)) {
                return Ok(i);
            }
            let partner = HOMOLOGOUS.iter().find_map(|&(l, r)| {
                if l.eq_ignore_ascii_case(c) {
                    Some(r)
                } else if r.eq_ignore_ascii_case(c) {
                    Some(l)
                } else {
                    None
                }
            });
            partner
                .and_then(find)
                .ok_or_else(|| Error::InvalidArgument(format!("channel {c} has no homologous partner in this montage")))
        })
        .collect()
}

/// Swaps left/right homologous channels of `window`.
pub fn reflect_window(window: &RawWindow, perm: &[usize]) -> RawWindow {
    let mut out = window.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.channel_mut(i).copy_from_slice(window.channel(src));
    }
    out
}

/// With probability 0.5 mirrors the window across the midline; returns
/// whether it did.
pub fn augment_midline_reflect<R: Rng + ?Sized>(
    window: &mut RawWindow,
    channels: &[String],
    rng: &mut R,
) -> Result<bool> {
    let perm = midline_permutation(channels)?;
    if rng.random_bool(0.5) {
        *window = reflect_window(window, &perm);
        Ok(true)
    } else {
        Ok(false)
    }
}
