//! Run configuration, graph choice and the named presets.

use std::path::Path;

use eegraph_core::graph::{
    build_distance_graph, build_distance_graph_bandwidth, graph_operators, EegGraph, ElectrodeLayout, LagMode,
};
use eegraph_core::ingest::SyntheticSpec;
use eegraph_core::model::ConvKind;
use eegraph_core::preprocess::LabelRemap;
use eegraph_core::training::{GraphSource, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// How clip graphs are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GraphSpec {
    /// Thresholded Gaussian kernel on electrode distances.
    Distance { kappa: f64 },
    /// Dense Gaussian kernel with a fixed bandwidth.
    DistanceBandwidth { bandwidth: f64 },
    /// Per-clip top-τ correlation graph.
    Correlation {
        tau: usize,
        #[serde(default)]
        lags: LagMode,
    },
}

impl GraphSpec {
    /// Convolution paired with the graph: Chebyshev on the undirected
    /// distance graphs, diffusion on the directed correlation graphs.
    pub fn conv_kind(&self) -> ConvKind {
        match self {
            Self::Correlation { .. } => ConvKind::Diffusion,
            _ => ConvKind::Chebyshev,
        }
    }

    /// The fixed graph over `channels`, or `None` for per-clip graphs.
    pub fn fixed_graph(&self, channels: &[String]) -> Result<Option<EegGraph>> {
        Ok(match *self {
            Self::Distance { kappa } => Some(build_distance_graph(&layout_for(channels)?, kappa)?),
            Self::DistanceBandwidth { bandwidth } => {
                Some(build_distance_graph_bandwidth(&layout_for(channels)?, bandwidth)?)
            }
            Self::Correlation { .. } => None,
        })
    }

    pub fn source(&self, channels: &[String]) -> Result<GraphSource> {
        Ok(match (*self, self.fixed_graph(channels)?) {
            (Self::Correlation { tau, lags }, _) => GraphSource::Correlation { tau, lags },
            (_, Some(g)) => GraphSource::Shared(graph_operators(&g)?),
            _ => unreachable!("distance graphs are fixed"),
        })
    }
}

/// The standard electrode positions reordered to `channels`.
pub fn layout_for(channels: &[String]) -> Result<ElectrodeLayout> {
    let std = ElectrodeLayout::standard();
    let mut coords = Vec::with_capacity(channels.len());
    for c in channels {
        let i = std
            .names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(c))
            .ok_or_else(|| Error::Config(format!("no electrode position for channel {c}")))?;
        coords.push(std.coords[i]);
    }
    Ok(ElectrodeLayout { names: channels.to_vec(), coords })
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_val_fraction() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Rate every recording is resampled to.
    pub sample_rate: f64,
    pub clip_len: usize,
    /// Seconds predicted by the pretraining decoder.
    pub horizon: usize,
    /// Recording-level split; the test split takes the rest.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub remap: LabelRemap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    /// Terms per direction of each graph convolution.
    pub k: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Encoder and decoder depth of the pretraining network.
    pub pretrain_layers: usize,
    /// Overrides the convolution paired with the graph.
    #[serde(default)]
    pub conv_kind: Option<ConvKind>,
}

/// Optimization settings of one training procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr_init: f64,
    #[serde(default)]
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub dropout: f64,
    pub undersample: bool,
    /// Amplitude scaling and midline reflection of the raw signal.
    pub augment: bool,
}

impl StageConfig {
    pub fn train_config(&self, seed: u64, lambda_aux: Option<f64>) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            lr_min: self.lr_min,
            epochs_max: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            lambda_aux,
            undersample: self.undersample,
        }
    }
}

fn default_batch() -> usize {
    32
}

fn default_bins() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretConfig {
    /// Keep each clip's unoccluded graph while occluding.
    #[serde(default)]
    pub freeze_graph: bool,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_bins")]
    pub hist_bins: usize,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self { freeze_graph: false, batch_size: default_batch(), hist_bins: default_bins() }
    }
}

/// Everything a command needs besides its paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub synth: SyntheticSpec,
    pub data: DataConfig,
    pub graph: GraphSpec,
    pub model: ModelShape,
    pub detect: StageConfig,
    pub classify: StageConfig,
    pub pretrain: StageConfig,
    #[serde(default)]
    pub interpret: InterpretConfig,
}

pub const PRESETS: [&str; 6] =
    ["paper-detect-12s", "paper-detect-60s", "paper-classify-12s", "paper-classify-60s", "desk", "tiny"];

fn paper(name: &str, clip_len: usize) -> RunConfig {
    let stage = |lr_init, epochs, dropout, undersample| StageConfig {
        lr_init,
        lr_min: 0.0,
        epochs,
        batch_size: 40,
        patience: 5,
        dropout,
        undersample,
        augment: true,
    };
    RunConfig {
        preset: name.into(),
        seed: 0,
        synth: desk_synth(),
        data: DataConfig {
            sample_rate: 200.0,
            clip_len,
            horizon: 12,
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            remap: LabelRemap::four_class(),
        },
        graph: GraphSpec::Correlation { tau: 3, lags: LagMode::AllLags },
        model: ModelShape { k: 2, layers: 2, hidden: 64, pretrain_layers: 3, conv_kind: None },
        detect: stage(1e-4, 100, 0.0, true),
        classify: stage(3e-4, 60, 0.5, false),
        pretrain: StageConfig { augment: false, ..stage(5e-4, 350, 0.0, false) },
        interpret: InterpretConfig::default(),
    }
}

fn desk_synth() -> SyntheticSpec {
    SyntheticSpec {
        n_recordings: 400,
        duration_sec: 48.0,
        sample_rate: 200.0,
        seizure_rate: 0.6,
        focal_fraction: 0.5,
        snr: 4.0,
        class_bands: SyntheticSpec::default_bands(),
        event_len_sec: [8.0, 20.0],
        seed: 0,
    }
}

fn desk() -> RunConfig {
    let stage = |lr_init, epochs, dropout, undersample| StageConfig {
        lr_init,
        lr_min: 0.0,
        epochs,
        batch_size: 40,
        patience: 5,
        dropout,
        undersample,
        augment: false,
    };
    RunConfig {
        preset: "desk".into(),
        model: ModelShape { k: 2, layers: 2, hidden: 32, pretrain_layers: 2, conv_kind: None },
        detect: stage(1e-3, 25, 0.0, true),
        classify: stage(1e-3, 25, 0.5, false),
        pretrain: stage(5e-4, 15, 0.0, false),
        ..paper("desk", 12)
    }
}

fn tiny() -> RunConfig {
    let stage = |dropout, undersample| StageConfig {
        lr_init: 3e-3,
        lr_min: 0.0,
        epochs: 2,
        batch_size: 16,
        patience: 2,
        dropout,
        undersample,
        augment: false,
    };
    RunConfig {
        preset: "tiny".into(),
        synth: SyntheticSpec { n_recordings: 12, duration_sec: 48.0, seizure_rate: 0.8, ..desk_synth() },
        data: DataConfig { train_fraction: 0.5, val_fraction: 0.25, ..paper("tiny", 12).data },
        model: ModelShape { k: 2, layers: 1, hidden: 8, pretrain_layers: 1, conv_kind: None },
        detect: stage(0.0, true),
        classify: stage(0.5, false),
        pretrain: stage(0.0, false),
        ..paper("tiny", 12)
    }
}

/// The named preset, if it exists.
pub fn preset(name: &str) -> Option<RunConfig> {
    Some(match name {
        "paper-detect-12s" | "paper-classify-12s" => paper(name, 12),
        "paper-detect-60s" | "paper-classify-60s" => paper(name, 60),
        "desk" => desk(),
        "tiny" => tiny(),
        _ => return None,
    })
}

/// Recursively overlays `patch` onto `base`. An object carrying a `mode`
/// tag replaces the old one wholesale, since its variant may change.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("mode") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `dotted.key=value` override; the value is read as JSON and
/// falls back to a string.
fn apply_set(base: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Usage(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.rsplit('.') {
        let mut obj = serde_json::Map::new();
        obj.insert(part.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(base, patch);
    Ok(())
}

impl RunConfig {
    /// Preset, then config file, then `key=value` overrides, then the seed.
    /// Unknown keys anywhere are rejected.
    pub fn resolve(preset_name: &str, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let base = preset(preset_name).ok_or_else(|| {
            Error::Config(format!("unknown preset {preset_name:?}; known presets: {}", PRESETS.join(", ")))
        })?;
        let mut value = serde_json::to_value(&base).expect("presets serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, patch);
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
            cfg.synth.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.synth.validate().map_err(|e| Error::Config(format!("synth: {e}")))?;
        self.data.remap.validate().map_err(|e| Error::Config(format!("data.remap: {e}")))?;
        let d = &self.data;
        if !(d.sample_rate > 0.0) || d.clip_len == 0 || d.horizon == 0 {
            return bad("data: sample_rate, clip_len and horizon must be positive".into());
        }
        if !(d.train_fraction > 0.0 && d.val_fraction > 0.0 && d.train_fraction + d.val_fraction <= 1.0) {
            return bad("data: split fractions must be positive and sum to at most 1".into());
        }
        let m = &self.model;
        if m.k == 0 || m.layers == 0 || m.hidden == 0 || m.pretrain_layers == 0 {
            return bad("model: k, layers, hidden and pretrain_layers must be positive".into());
        }
        match self.graph {
            GraphSpec::Distance { kappa } if !(kappa > 0.0) => return bad("graph: kappa must be positive".into()),
            GraphSpec::DistanceBandwidth { bandwidth } if !(bandwidth > 0.0) => {
                return bad("graph: bandwidth must be positive".into())
            }
            GraphSpec::Correlation { tau: 0, .. } => return bad("graph: tau must be at least 1".into()),
            _ => {}
        }
        for (name, s) in [("detect", &self.detect), ("classify", &self.classify), ("pretrain", &self.pretrain)] {
            if !(s.lr_init > 0.0) || s.lr_min < 0.0 || s.lr_min > s.lr_init {
                return bad(format!("{name}: need 0 <= lr_min <= lr_init and lr_init > 0"));
            }
            if s.epochs == 0 || s.batch_size == 0 || s.patience == 0 {
                return bad(format!("{name}: epochs, batch_size and patience must be positive"));
            }
            if !(0.0..1.0).contains(&s.dropout) {
                return bad(format!("{name}: dropout must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn conv_kind(&self) -> ConvKind {
        self.model.conv_kind.unwrap_or_else(|| self.graph.conv_kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESETS {
            let cfg = RunConfig::resolve(name, None, &[], None).unwrap();
            assert_eq!(cfg.preset, name);
            let back: RunConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let sets = ["detect.epochs=3".to_string(), "graph.mode=distance".into(), "graph.kappa=0.9".into()];
        let cfg = RunConfig::resolve("tiny", None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.detect.epochs, 3);
        assert_eq!(cfg.graph, GraphSpec::Distance { kappa: 0.9 });
        assert_eq!((cfg.seed, cfg.synth.seed), (9, 9));
        let sets = ["graph={\"mode\":\"distance-bandwidth\",\"bandwidth\":0.06}".to_string()];
        let cfg = RunConfig::resolve("tiny", None, &sets, None).unwrap();
        assert_eq!(cfg.graph, GraphSpec::DistanceBandwidth { bandwidth: 0.06 });
        // a mode switch without its parameter is incomplete
        assert!(RunConfig::resolve("tiny", None, &["graph.mode=distance".into()], None).is_err());
        assert!(RunConfig::resolve("tiny", None, &["detect.bogus=1".into()], None).is_err());
        assert!(RunConfig::resolve("nope", None, &[], None).is_err());
    }

    #[test]
    fn graph_pairing() {
        let chans = eegraph_core::ingest::standard_channel_names();
        assert_eq!(GraphSpec::Distance { kappa: 0.9 }.conv_kind(), ConvKind::Chebyshev);
        let g = GraphSpec::Distance { kappa: 0.9 }.fixed_graph(&chans).unwrap().unwrap();
        assert!(!g.directed);
        assert!(GraphSpec::Correlation { tau: 3, lags: LagMode::AllLags }.fixed_graph(&chans).unwrap().is_none());
        assert!(layout_for(&["Q9".to_string()]).is_err());
    }
}
