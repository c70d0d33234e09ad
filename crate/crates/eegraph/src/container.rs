//! Recording containers and Fourier resampling.
//!
//! A container is a directory holding `manifest.json`, `signal.bin`
//! (channel-major little-endian `f32`) and `annotations.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use eegraph_core::ingest::{Recording, SeizureEvent};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SIGNAL: &str = "signal.bin";
pub const ANNOTATIONS: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub channels: Vec<String>,
    pub sample_rate: f64,
    pub n_samples: usize,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub(crate) fn f32_values(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
}

/// Writes `rec` as a container directory, creating it if needed.
pub fn save_recording(rec: &Recording, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let manifest = Manifest { channels: rec.channels.clone(), sample_rate: rec.sample_rate, n_samples: rec.n_samples };
    write_json(&dir.join(MANIFEST), &manifest)?;
    let signal = dir.join(SIGNAL);
    fs::write(&signal, f32_bytes(rec.data.iter().copied())).map_err(Error::io(&signal))?;
    write_json(&dir.join(ANNOTATIONS), &rec.annotations)
}

/// Reads a container directory. The recording id is the directory name.
pub fn load_recording(dir: &Path) -> Result<Recording> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::format(dir, "missing manifest.json"));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let signal = dir.join(SIGNAL);
    let bytes = fs::read(&signal).map_err(Error::io(&signal))?;
    let expected = manifest.channels.len() * manifest.n_samples * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &signal,
            format!("payload size mismatch: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let annotations_path = dir.join(ANNOTATIONS);
    let annotations: Vec<SeizureEvent> =
        if annotations_path.is_file() { read_json(&annotations_path)? } else { Vec::new() };
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Recording::new(id, manifest.channels, manifest.sample_rate, f32_values(&bytes), annotations)
        .map_err(|e| Error::format(dir, e.to_string()))
}

/// Container directories under `root`, sorted by name. `root` itself counts
/// when it is a container.
pub fn list_recordings(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(MANIFEST).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(Error::io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no recording containers found"));
    }
    Ok(dirs)
}

/// Writes every recording to `root/<id>/`.
pub fn save_corpus(recs: &[Recording], root: &Path) -> Result<()> {
    recs.iter().try_for_each(|r| save_recording(r, &root.join(&r.id)))
}

pub fn load_corpus(root: &Path) -> Result<Vec<Recording>> {
    list_recordings(root)?.iter().map(|d| load_recording(d)).collect()
}

/// Fourier resampler between two fixed lengths.
pub struct Resampler {
    n_in: usize,
    n_out: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Resampler {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n_in, n_out, forward: planner.plan_fft_forward(n_in), inverse: planner.plan_fft_inverse(n_out) }
    }

    /// Transforms, keeps (or zero-pads) the lowest `min(n_in, n_out)`
    /// frequencies and transforms back. An even-length Nyquist bin is folded
    /// when shrinking and split when growing.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_in, "resampler input length");
        let (n_in, n_out) = (self.n_in, self.n_out);
        if n_in == 0 || n_out == 0 {
            return vec![0.0; n_out];
        }
        let mut spec: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut spec);
        let n = n_in.min(n_out);
        let nyq = n / 2 + 1;
        let mut out = vec![Complex::new(0.0, 0.0); n_out];
        out[..nyq].copy_from_slice(&spec[..nyq]);
        let neg = n - nyq;
        if neg > 0 {
            out[n_out - neg..].copy_from_slice(&spec[n_in - neg..]);
        }
        if n % 2 == 0 {
            if n_out < n_in {
                out[n / 2] += spec[n_in - n / 2];
            } else if n_in < n_out {
                out[n / 2] *= 0.5;
                out[n_out - n / 2] = out[n / 2];
            }
        }
        self.inverse.process(&mut out);
        // the inverse transform is unnormalized; the 1/n_in restores scale
        let scale = 1.0 / n_in as f64;
        out.iter().map(|c| c.re * scale).collect()
    }
}

/// Output sample count of resampling `n` samples from `rate` to `target`.
pub fn resampled_len(n: usize, rate: f64, target: f64) -> usize {
    (n as f64 * target / rate).round() as usize
}

/// Fourier-method resampling of every channel to `target_rate`.
/// Annotations are in seconds and carry over unchanged.
pub fn resample_recording(rec: &Recording, target_rate: f64) -> Result<Recording> {
    if !(target_rate > 0.0) || !target_rate.is_finite() {
        return Err(Error::Usage(format!("target rate must be positive, got {target_rate}")));
    }
    let n_out = resampled_len(rec.n_samples, rec.sample_rate, target_rate);
    if n_out == rec.n_samples && target_rate == rec.sample_rate {
        // an f32 → f64 transform round trip may move samples by an ulp
        return Ok(rec.clone());
    }
    let rs = Resampler::new(rec.n_samples, n_out);
    let mut data = Vec::with_capacity(rec.n_channels() * n_out);
    let mut buf = vec![0.0; rec.n_samples];
    for c in 0..rec.n_channels() {
        for (b, &v) in buf.iter_mut().zip(rec.channel(c)) {
            *b = f64::from(v);
        }
        data.extend(rs.apply(&buf).into_iter().map(|v| v as f32));
    }
    // an event ending at the old last sample may overshoot the new duration
    // by less than one sample
    let duration = n_out as f64 / target_rate;
    let annotations =
        rec.annotations.iter().map(|e| SeizureEvent { offset_sec: e.offset_sec.min(duration), ..e.clone() }).collect();
    Ok(Recording::new(rec.id.clone(), rec.channels.clone(), target_rate, data, annotations)?)
}
