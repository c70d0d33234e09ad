//! Recordings, seizure annotations, channel-second annotation masks and the
//! synthetic recording generator used as a desk-scale stand-in for clinical
//! corpora.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::graph::ElectrodeLayout;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// The 19 channels of the 10-20 system in canonical order.
pub const STANDARD_CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F3", "F4", "C3", "C4", "P3", "P4", "O1", "O2", "F7", "F8", "T3", "T4", "T5", "T6", "Fz", "Cz", "Pz",
];

pub fn standard_channel_names() -> Vec<String> {
    STANDARD_CHANNELS.iter().map(|s| s.to_string()).collect()
}

/// One annotated seizure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeizureEvent {
    pub onset_sec: f64,
    pub offset_sec: f64,
    pub class_label: String,
    /// Involved channels; `None` means every channel.
    pub channel_mask: Option<Vec<bool>>,
}

impl SeizureEvent {
    /// Whether the event overlaps the half-open window `[start, end)`.
    pub fn overlaps(&self, start: f64, end: f64) -> bool {
        self.onset_sec < end && self.offset_sec > start
    }

    pub fn involves(&self, channel: usize) -> bool {
        self.channel_mask.as_ref().map_or(true, |m| m[channel])
    }
}

/// A multichannel recording held channel-major as 32-bit samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub n_samples: usize,
    pub data: Vec<f32>,
    pub annotations: Vec<SeizureEvent>,
}

impl Recording {
    /// Builds a recording, checking the container invariants.
    pub fn new(
        id: impl Into<String>,
        channels: Vec<String>,
        sample_rate: f64,
        data: Vec<f32>,
        annotations: Vec<SeizureEvent>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("sample rate {sample_rate}")));
        }
        if channels.is_empty() {
            return Err(Error::InvalidArgument("no channels".into()));
        }
        for (i, c) in channels.iter().enumerate() {
            if channels[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("duplicate channel {c}")));
            }
        }
        if data.len() % channels.len() != 0 {
            return Err(Error::Shape(format!("{} samples do not split over {} channels", data.len(), channels.len())));
        }
        let n_samples = data.len() / channels.len();
        let rec = Self { id: id.into(), channels, sample_rate, n_samples, data, annotations: Vec::new() };
        let duration = rec.duration_sec();
        for ev in &annotations {
            validate_event(ev, duration, rec.channels.len())?;
        }
        Ok(Self { annotations, ..rec })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn duration_sec(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn channel(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    /// Samples of `[start_sec, start_sec + len_sec)` as a channel-major
    /// `f64` window. Start is rounded to the nearest sample.
    pub fn window(&self, start_sec: f64, len_sec: f64) -> Result<RawWindow> {
        let end = start_sec + len_sec;
        let duration = self.duration_sec();
        if start_sec < 0.0 || end > duration + 1e-9 || len_sec <= 0.0 {
            return Err(Error::WindowOutOfBounds { start: start_sec, end, duration });
        }
        let first = (start_sec * self.sample_rate).round() as usize;
        let len = (len_sec * self.sample_rate).round() as usize;
        if first + len > self.n_samples {
            return Err(Error::WindowOutOfBounds { start: start_sec, end, duration });
        }
        let mut data = Vec::with_capacity(len * self.n_channels());
        for c in 0..self.n_channels() {
            data.extend(self.channel(c)[first..first + len].iter().map(|&v| v as f64));
        }
        Ok(RawWindow { n_channels: self.n_channels(), n_samples: len, sample_rate: self.sample_rate, data })
    }
}

pub(crate) fn validate_event(ev: &SeizureEvent, duration: f64, n_channels: usize) -> Result<()> {
    if !(ev.onset_sec >= 0.0 && ev.onset_sec < ev.offset_sec && ev.offset_sec <= duration + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "malformed annotation [{}, {}) for a {duration} s recording",
            ev.onset_sec, ev.offset_sec
        )));
    }
    if let Some(mask) = &ev.channel_mask {
        if mask.len() != n_channels {
            return Err(Error::Shape(format!(
                "channel mask has {} entries, recording has {n_channels} channels",
                mask.len()
            )));
        }
    }
    Ok(())
}

/// A raw time-domain window, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub n_channels: usize,
    pub n_samples: usize,
    pub sample_rate: f64,
    pub data: Vec<f64>,
}

impl RawWindow {
    pub fn channel(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn channel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }
}

/// Channel × second binary grid of annotated seizure activity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMask {
    pub n_channels: usize,
    pub n_seconds: usize,
    /// Row-major `n_channels × n_seconds` entries in {0, 1}.
    pub grid: Vec<u8>,
}

impl AnnotationMask {
    pub fn get(&self, channel: usize, second: usize) -> u8 {
        self.grid[channel * self.n_seconds + second]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().map(|&v| v as usize).sum()
    }
}

/// Channel-second annotation mask of the clip `[clip_start_sec,
/// clip_start_sec + clip_len_sec)`: cell (i, j) is set when an event
/// overlaps second j of the clip on channel i.
pub fn annotation_mask(rec: &Recording, clip_start_sec: f64, clip_len_sec: f64) -> Result<AnnotationMask> {
    let end = clip_start_sec + clip_len_sec;
    let duration = rec.duration_sec();
    if clip_start_sec < 0.0 || clip_len_sec <= 0.0 || end > duration + 1e-9 {
        return Err(Error::WindowOutOfBounds { start: clip_start_sec, end, duration });
    }
    let n = rec.n_channels();
    let t = clip_len_sec.round() as usize;
    let mut grid = vec![0u8; n * t];
    for ev in &rec.annotations {
        for j in 0..t {
            let s0 = clip_start_sec + j as f64;
            if !ev.overlaps(s0, s0 + 1.0) {
                continue;
            }
            for i in 0..n {
                if ev.involves(i) {
                    grid[i * t + j] = 1;
                }
            }
        }
    }
    Ok(AnnotationMask { n_channels: n, n_seconds: t, grid })
}

fn default_sample_rate() -> f64 {
    200.0
}

fn default_event_len() -> [f64; 2] {
    [8.0, 20.0]
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_recordings: usize,
    pub duration_sec: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    /// Probability that a recording carries one seizure event.
    pub seizure_rate: f64,
    /// Probability that an event is focal rather than generalized.
    pub focal_fraction: f64,
    /// Burst amplitude in units of the background RMS.
    pub snr: f64,
    /// Seizure class tag → burst frequency band in Hz.
    pub class_bands: BTreeMap<String, [f64; 2]>,
    /// Range of event durations in seconds.
    #[serde(default = "default_event_len")]
    pub event_len_sec: [f64; 2],
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four band-separated classes tagged with the usual corpus labels.
    pub fn default_bands() -> BTreeMap<String, [f64; 2]> {
        let mut bands = BTreeMap::new();
        bands.insert("FNSZ".to_string(), [4.0, 6.0]);
        bands.insert("GNSZ".to_string(), [14.0, 17.0]);
        bands.insert("ABSZ".to_string(), [2.5, 3.5]);
        bands.insert("TNSZ".to_string(), [22.0, 26.0]);
        bands
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if !(self.sample_rate > 0.0) || !(self.duration_sec > 0.0) {
            return bad("sample rate and duration must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.seizure_rate) || !(0.0..=1.0).contains(&self.focal_fraction) {
            return bad("seizure_rate and focal_fraction must lie in [0, 1]".into());
        }
        let [lo, hi] = self.event_len_sec;
        if !(lo > 0.0 && lo <= hi && hi <= self.duration_sec) {
            return bad(format!("event length range [{lo}, {hi}] does not fit the recording"));
        }
        if self.class_bands.is_empty() && self.seizure_rate > 0.0 {
            return bad("seizures requested but no class bands given".into());
        }
        let nyquist = self.sample_rate / 2.0;
        let bands: Vec<&[f64; 2]> = self.class_bands.values().collect();
        for (i, b) in bands.iter().enumerate() {
            if !(b[0] > 0.0 && b[0] <= b[1] && b[1] < nyquist) {
                return bad(format!("band [{}, {}] must satisfy 0 < lo <= hi < Nyquist", b[0], b[1]));
            }
            for other in &bands[..i] {
                if b[0] <= other[1] && other[0] <= b[1] {
                    return bad("class bands overlap".into());
                }
            }
        }
        Ok(())
    }
}

/// Generates the corpus described by `spec`. Recording `k` depends only on
/// `spec` and `k`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let layout = ElectrodeLayout::standard();
    (0..spec.n_recordings).map(|k| generate_one(spec, &layout, k)).collect()
}

fn generate_one(spec: &SyntheticSpec, layout: &ElectrodeLayout, index: usize) -> Result<Recording> {
    let mut rng = stream_rng(spec.seed, Stream::Synthesis, index as u64);
    let n = layout.names.len();
    let fs = spec.sample_rate;
    let len = (spec.duration_sec * fs).round() as usize;
    let dt = 1.0 / fs;

    let mut signal = vec![0.0f64; n * len];
    let mut rms = vec![0.0f64; n];
    for c in 0..n {
        let gain = rng.random_range(0.8..1.2);
        let alpha_freq = rng.random_range(8.0..12.0);
        let alpha_phase = rng.random_range(0.0..2.0 * PI);
        let alpha_amp = 0.3 * gain;
        let mut state = 0.0f64;
        let row = &mut signal[c * len..(c + 1) * len];
        // AR(1) pink-ish noise with unit stationary variance.
        let phi = 0.9f64;
        let innov = (1.0 - phi * phi).sqrt();
        for (s, v) in row.iter_mut().enumerate() {
            let w: f64 = rng.sample(StandardNormal);
            state = phi * state + innov * w;
            let t = s as f64 * dt;
            *v = gain * state + alpha_amp * (2.0 * PI * alpha_freq * t + alpha_phase).sin();
        }
        rms[c] = (row.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    }

    let mut annotations = Vec::new();
    if rng.random::<f64>() < spec.seizure_rate {
        let labels: Vec<(&String, &[f64; 2])> = spec.class_bands.iter().collect();
        let (label, band) = labels[rng.random_range(0..labels.len())];
        let [lo, hi] = spec.event_len_sec;
        let ev_len = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let onset = (rng.random_range(0.0..=(spec.duration_sec - ev_len)) * 100.0).floor() / 100.0;
        let offset = ((onset + ev_len) * 100.0).floor() / 100.0;
        let focal = rng.random::<f64>() < spec.focal_fraction;
        let mask = if focal {
            let size = rng.random_range(2..=5usize);
            let seed_channel = rng.random_range(0..n);
            let mut chosen = vec![false; n];
            for c in layout.nearest(seed_channel, size) {
                chosen[c] = true;
            }
            Some(chosen)
        } else {
            None
        };
        let freq = if band[1] > band[0] { rng.random_range(band[0]..band[1]) } else { band[0] };
        let first = (onset * fs).round() as usize;
        let last = ((offset * fs).round() as usize).min(len);
        let ramp = (0.25 * fs) as usize;
        for c in 0..n {
            let phase = rng.random_range(0.0..2.0 * PI);
            let level = rng.random_range(0.85..1.0);
            if !mask.as_ref().map_or(true, |m: &Vec<bool>| m[c]) {
                continue;
            }
            let amp = spec.snr * rms[c] * level;
            let row = &mut signal[c * len..(c + 1) * len];
            for s in first..last {
                let k = (s - first).min(last - 1 - s);
                let env = if k < ramp { 0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos() } else { 1.0 };
                let t = (s - first) as f64 * dt;
                row[s] += amp * env * (2.0 * PI * freq * t + phase).sin();
            }
        }
        annotations.push(SeizureEvent {
            onset_sec: onset,
            offset_sec: offset,
            class_label: label.clone(),
            channel_mask: mask,
        });
    }

    let data = signal.iter().map(|&v| v as f32).collect();
    Recording::new(format!("synth_{index:05}"), layout.names.clone(), fs, data, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_with(events: Vec<SeizureEvent>, secs: usize) -> Recording {
        let chans = standard_channel_names();
        let data = vec![0.0f32; chans.len() * secs * 200];
        Recording::new("r", chans, 200.0, data, events).unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let rec = rec_with(vec![], 60);
        assert_eq!((rec.n_channels(), rec.n_samples), (19, 12000));
    }

    #[test]
    fn malformed_annotation_rejected() {
        let chans = standard_channel_names();
        let ev = SeizureEvent { onset_sec: 5.0, offset_sec: 5.0, class_label: "FNSZ".into(), channel_mask: None };
        assert!(Recording::new("r", chans, 200.0, vec![0.0; 19 * 2000], vec![ev]).is_err());
    }

    #[test]
    fn mask_outside_events_is_zero() {
        let ev = SeizureEvent { onset_sec: 30.0, offset_sec: 40.0, class_label: "x".into(), channel_mask: None };
        let m = annotation_mask(&rec_with(vec![ev], 60), 0.0, 12.0).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn generalized_event_fills_mask() {
        let ev = SeizureEvent { onset_sec: 0.0, offset_sec: 60.0, class_label: "x".into(), channel_mask: None };
        let m = annotation_mask(&rec_with(vec![ev], 60), 12.0, 12.0).unwrap();
        assert_eq!(m.count(), 19 * 12);
    }

    #[test]
    fn focal_event_mask_hand_count() {
        let mut chans = vec![false; 19];
        chans[2] = true;
        chans[5] = true;
        let ev = SeizureEvent { onset_sec: 3.0, offset_sec: 7.0, class_label: "x".into(), channel_mask: Some(chans) };
        let m = annotation_mask(&rec_with(vec![ev], 12), 0.0, 12.0).unwrap();
        assert_eq!(m.count(), 8);
        for i in 0..19 {
            for j in 0..12 {
                let want = (i == 2 || i == 5) && (3..=6).contains(&j);
                assert_eq!(m.get(i, j) == 1, want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn mask_window_out_of_bounds() {
        assert!(annotation_mask(&rec_with(vec![], 12), 6.0, 12.0).is_err());
    }

    #[test]
    fn adjacent_clips_tile_the_union_mask() {
        let ev = SeizureEvent { onset_sec: 9.4, offset_sec: 15.2, class_label: "x".into(), channel_mask: None };
        let rec = rec_with(vec![ev], 24);
        let whole = annotation_mask(&rec, 0.0, 24.0).unwrap();
        let a = annotation_mask(&rec, 0.0, 12.0).unwrap();
        let b = annotation_mask(&rec, 12.0, 12.0).unwrap();
        for i in 0..19 {
            for j in 0..24 {
                let part = if j < 12 { a.get(i, j) } else { b.get(i, j - 12) };
                assert_eq!(part, whole.get(i, j));
            }
        }
    }

    fn spec(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_recordings: n,
            duration_sec: 24.0,
            sample_rate: 200.0,
            seizure_rate: 0.8,
            focal_fraction: 0.7,
            snr: 4.0,
            class_bands: SyntheticSpec::default_bands(),
            event_len_sec: [6.0, 12.0],
            seed,
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        assert_eq!(generate_synthetic(&spec(10, 7)).unwrap(), generate_synthetic(&spec(10, 7)).unwrap());
        assert_ne!(generate_synthetic(&spec(2, 7)).unwrap(), generate_synthetic(&spec(2, 8)).unwrap());
    }

    #[test]
    fn focal_masks_have_two_to_five_adjacent_channels() {
        let layout = ElectrodeLayout::standard();
        let recs = generate_synthetic(&spec(60, 3)).unwrap();
        let mut focal = 0;
        for rec in &recs {
            for ev in &rec.annotations {
                if let Some(mask) = &ev.channel_mask {
                    focal += 1;
                    let k = mask.iter().filter(|&&b| b).count();
                    assert!((2..=5).contains(&k));
                    // every involved channel is within 2 · κ of another involved one
                    let idx: Vec<usize> = (0..19).filter(|&i| mask[i]).collect();
                    for &i in &idx {
                        assert!(idx.iter().any(|&j| j != i && layout.distance(i, j) < 1.2));
                    }
                }
            }
        }
        assert!(focal > 10);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(1, 0);
        s.snr = 0.0;
        assert!(s.validate().is_err());
        let mut s = spec(1, 0);
        s.class_bands.insert("X".into(), [5.0, 15.0]);
        assert!(s.validate().is_err());
        let mut s = spec(1, 0);
        s.class_bands.insert("X".into(), [90.0, 120.0]);
        assert!(s.validate().is_err());
    }
}
