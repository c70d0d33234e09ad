//! Binary clip archives and weight files.
//!
//! Both share one framing: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header and a little-endian `f32` payload.

use std::fs;
use std::path::Path;

use eegraph_core::ingest::AnnotationMask;
use eegraph_core::model::{Model, ModelConfig};
use eegraph_core::preprocess::{ClipSource, EegClip, NormStats};
use eegraph_core::tensor::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::GraphSpec;
use crate::container::{f32_bytes, f32_values};
use crate::dataset::{ClipRecord, ClipSet, ClipTask, Split};
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"EEGCLIP1";
pub const WEIGHT_MAGIC: &[u8; 8] = b"EEGWGT01";

fn write_framed<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: impl IntoIterator<Item = f32>,
) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(Error::json(path))?;
    let mut bytes = Vec::with_capacity(16 + json.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend(f32_bytes(payload));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read_framed<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::format(path, format!("not a {} file", String::from_utf8_lossy(magic))));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if len > body.len() || (body.len() - len) % 4 != 0 {
        return Err(Error::format(path, "truncated header or payload"));
    }
    let header = serde_json::from_slice(&body[..len]).map_err(Error::json(path))?;
    Ok((header, f32_values(&body[len..])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetEntry {
    n_steps: usize,
    valid_len: usize,
    source: ClipSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipEntry {
    split: Split,
    n_steps: usize,
    n_features: usize,
    valid_len: usize,
    label: Option<usize>,
    source: ClipSource,
    annotation: Option<AnnotationMask>,
    target: Option<TargetEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipHeader {
    task: ClipTask,
    channels: Vec<String>,
    clip_len: usize,
    horizon: Option<usize>,
    n_classes: Option<usize>,
    stats: NormStats,
    recordings: Option<String>,
    clips: Vec<ClipEntry>,
}

/// Writes a clip set. Features are stored as `f32`.
pub fn save_clip_set(set: &ClipSet, path: &Path) -> Result<()> {
    let header = ClipHeader {
        task: set.task,
        channels: set.channels.clone(),
        clip_len: set.clip_len,
        horizon: set.horizon,
        n_classes: set.n_classes,
        stats: set.stats.clone(),
        recordings: set.recordings.clone(),
        clips: set
            .clips
            .iter()
            .map(|r| ClipEntry {
                split: r.split,
                n_steps: r.clip.n_steps,
                n_features: r.clip.n_features,
                valid_len: r.clip.valid_len,
                label: r.clip.label,
                source: r.clip.source.clone(),
                annotation: r.annotation.clone(),
                target: r.target.as_ref().map(|t| TargetEntry {
                    n_steps: t.n_steps,
                    valid_len: t.valid_len,
                    source: t.source.clone(),
                }),
            })
            .collect(),
    };
    let payload = set.clips.iter().flat_map(|r| {
        let target = r.target.iter().flat_map(|t| t.features.iter());
        r.clip.features.iter().chain(target).map(|&v| v as f32)
    });
    write_framed(path, CLIP_MAGIC, &header, payload)
}

pub fn load_clip_set(path: &Path) -> Result<ClipSet> {
    let (h, values): (ClipHeader, Vec<f32>) = read_framed(path, CLIP_MAGIC)?;
    let n = h.channels.len();
    let mut at = 0usize;
    let mut take = |steps: usize, m: usize| -> Result<Vec<f64>> {
        let len = steps * n * m;
        let chunk = values.get(at..at + len).ok_or_else(|| Error::format(path, "payload size mismatch"))?;
        at += len;
        Ok(chunk.iter().map(|&v| f64::from(v)).collect())
    };
    let mut clips = Vec::with_capacity(h.clips.len());
    for e in h.clips {
        let clip = EegClip::new(e.n_steps, n, e.n_features, e.valid_len, take(e.n_steps, e.n_features)?, e.label)?
            .with_source(e.source);
        let target = match e.target {
            Some(t) => Some(
                EegClip::new(t.n_steps, n, e.n_features, t.valid_len, take(t.n_steps, e.n_features)?, None)?
                    .with_source(t.source),
            ),
            None => None,
        };
        clips.push(ClipRecord { clip, target, split: e.split, annotation: e.annotation });
    }
    if at != values.len() {
        return Err(Error::format(path, "payload size mismatch"));
    }
    Ok(ClipSet {
        task: h.task,
        channels: h.channels,
        clip_len: h.clip_len,
        horizon: h.horizon,
        n_classes: h.n_classes,
        stats: h.stats,
        recordings: h.recordings,
        clips,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightMeta {
    pub graph: GraphSpec,
    pub channels: Vec<String>,
    /// Decision threshold chosen on validation data (detection).
    pub threshold: Option<f64>,
    /// Echo of the run configuration that produced the weights.
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightHeader {
    version: u32,
    model: ModelConfig,
    meta: WeightMeta,
    tensors: Vec<TensorEntry>,
}

/// Writes the model's parameters as `f32`. Round the store with
/// [`ParamStore::round_to_f32`] first for a bit-exact reload.
pub fn save_weights(model: &Model, meta: &WeightMeta, path: &Path) -> Result<()> {
    let header = WeightHeader {
        version: 1,
        model: model.config.clone(),
        meta: meta.clone(),
        tensors: model
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.into(), shape: t.shape.clone() })
            .collect(),
    };
    let payload = model.params.iter().flat_map(|(_, _, t)| t.data.iter().map(|&v| v as f32));
    write_framed(path, WEIGHT_MAGIC, &header, payload)
}

/// Reads a weight file, checking names and shapes against its config.
pub fn load_weights(path: &Path) -> Result<(Model, WeightMeta)> {
    let (h, values): (WeightHeader, Vec<f32>) = read_framed(path, WEIGHT_MAGIC)?;
    if h.version != 1 {
        return Err(Error::format(path, format!("unsupported weight format version {}", h.version)));
    }
    let mut store = ParamStore::new();
    let mut at = 0usize;
    for t in h.tensors {
        let len: usize = t.shape.iter().product();
        let chunk = values.get(at..at + len).ok_or_else(|| Error::format(path, "payload size mismatch"))?;
        at += len;
        store.push(t.name, Tensor::new(t.shape, chunk.iter().map(|&v| f64::from(v)).collect())?);
    }
    if at != values.len() {
        return Err(Error::format(path, "payload size mismatch"));
    }
    let model = Model::from_params(h.model, store).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, h.meta))
}
