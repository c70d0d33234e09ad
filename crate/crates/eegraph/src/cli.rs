//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use eegraph_core::graph::{build_correlation_graph, EegGraph, LagMode};
use eegraph_core::ingest::{generate_synthetic, SyntheticSpec};
use eegraph_core::interpret::Overlay;
use eegraph_core::model::Model;
use eegraph_core::preprocess::NormStats;
use eegraph_core::training::EpochStats;
use serde::Serialize;
use serde_json::{json, Value};

use crate::archive::{load_clip_set, load_weights, save_clip_set, save_weights};
use crate::config::{layout_for, GraphSpec, RunConfig};
use crate::container::{load_corpus, read_json, resample_recording, save_corpus, write_json};
use crate::dataset::{build_clip_set, ClipTask, Split};
use crate::error::{Error, Result};
use crate::overlay::export_overlay;
use crate::pipeline::{self, StageOptions, Threshold};

#[derive(Debug, Parser)]
#[command(name = "eegraph", version, about = "Graph-based seizure detection and classification on multichannel EEG")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Named configuration preset.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,
    /// JSON file merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// `dotted.key=json` override applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "EEGRAPH_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Print per-epoch progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic recording corpus.
    Synth {
        /// Generator parameters; defaults to the preset's.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Window, featurize and normalize recordings into a clip archive.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        task: ClipTask,
        /// Clip length in seconds; defaults to the preset's.
        #[arg(long)]
        clip_len: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the normalization statistics.
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Normalize with existing statistics instead of fitting them.
        #[arg(long)]
        stats_in: Option<PathBuf>,
    },
    /// Build an electrode graph for external visualization.
    Graph {
        #[arg(long)]
        mode: GraphMode,
        #[arg(long, default_value_t = 0.9)]
        kappa: f64,
        #[arg(long, default_value_t = 0.06)]
        bandwidth: f64,
        #[arg(long, default_value_t = 3)]
        tau: usize,
        /// Only zero-lag correlations.
        #[arg(long)]
        zero_lag: bool,
        /// Clip of a correlation graph, as `archive#index`.
        #[arg(long)]
        clip: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised next-window pretraining.
    Pretrain {
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a detector or classifier.
    Train {
        #[arg(long)]
        task: TrainTask,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained weights initializing the encoder.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Weight of the next-window objective (detection only).
        #[arg(long)]
        aux_lambda: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Metrics of trained weights on a clip split.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Decision threshold, or `auto` for the validation-chosen one.
        #[arg(long, default_value = "auto")]
        threshold: Threshold,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Occlusion maps and localization scores of annotated clips.
    Interpret {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        task: TrainTask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// At most this many clips.
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphMode {
    Distance,
    DistanceBandwidth,
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainTask {
    Detect,
    Classify,
}

impl From<TrainTask> for ClipTask {
    fn from(t: TrainTask) -> Self {
        match t {
            TrainTask::Detect => ClipTask::Detect,
            TrainTask::Classify => ClipTask::Classify,
        }
    }
}

struct Ctx {
    run: RunConfig,
    data_dir: Option<PathBuf>,
    verbose: bool,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn config_value(&self) -> Value {
        serde_json::to_value(&self.run).expect("config serializes")
    }

    /// Writes `report` to `path`, or prints it when no path is given.
    fn emit<T: Serialize>(&self, path: Option<&Path>, report: &T) -> Result<()> {
        match path {
            Some(p) => write_json(&self.path(p), report),
            None => {
                let text = serde_json::to_string_pretty(report).expect("reports serialize");
                println!("{text}");
                Ok(())
            }
        }
    }

    fn progress(&self) -> Option<impl Fn(&EpochStats, &Model)> {
        self.verbose.then_some(|s: &EpochStats, _: &Model| {
            eprintln!("epoch {:>3}  train {:.5}  val {:.5}  lr {:.3e}", s.epoch, s.train_loss, s.val_loss, s.lr);
        })
    }
}

/// Parses `argv` and runs the command. Returns the process exit code; errors
/// are printed to stderr as `{"error": {"kind", "message"}}`.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            return report_error(&Error::Usage(e.to_string().trim_end().to_string()));
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("{}", json!({"error": {"kind": e.kind(), "message": e.to_string()}}));
    e.exit_code()
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx {
        run: RunConfig::resolve(&g.preset, g.config.as_deref(), &g.sets, g.seed)?,
        data_dir: g.data_dir,
        verbose: g.verbose,
    };
    match cli.command {
        Command::Synth { spec, out } => synth(&ctx, spec.as_deref(), &out, g.seed),
        Command::Preprocess { input, task, clip_len, out, stats, stats_in } => {
            preprocess(&ctx, &input, task, clip_len, &out, stats.as_deref(), stats_in.as_deref())
        }
        Command::Graph { mode, kappa, bandwidth, tau, zero_lag, clip, out } => {
            let lags = if zero_lag { LagMode::ZeroLag } else { LagMode::AllLags };
            let spec = match mode {
                GraphMode::Distance => GraphSpec::Distance { kappa },
                GraphMode::DistanceBandwidth => GraphSpec::DistanceBandwidth { bandwidth },
                GraphMode::Correlation => GraphSpec::Correlation { tau, lags },
            };
            graph(&ctx, spec, clip.as_deref(), &out)
        }
        Command::Pretrain { clips, out, report } => pretrain(&ctx, &clips, &out, report.as_deref()),
        Command::Train { task, clips, out, init, aux_lambda, report } => {
            train(&ctx, task, &clips, &out, init.as_deref(), aux_lambda, report.as_deref())
        }
        Command::Eval { weights, clips, split, threshold, report } => {
            eval(&ctx, &weights, &clips, split, threshold, report.as_deref())
        }
        Command::Interpret { weights, clips, task, out, split, limit } => {
            interpret(&ctx, &weights, &clips, task, &out, split, limit)
        }
    }
}

fn synth(ctx: &Ctx, spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => read_json(&ctx.path(p))?,
        None => ctx.run.synth.clone(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
    let recs = generate_synthetic(&spec)?;
    let out = ctx.path(out);
    save_corpus(&recs, &out)?;
    write_json(&out.join("synth_spec.json"), &spec)
}

fn preprocess(
    ctx: &Ctx,
    input: &Path,
    task: ClipTask,
    clip_len: Option<usize>,
    out: &Path,
    stats_out: Option<&Path>,
    stats_in: Option<&Path>,
) -> Result<()> {
    let mut data = ctx.run.data.clone();
    if let Some(len) = clip_len {
        if len == 0 {
            return Err(Error::Usage("--clip-len must be positive".into()));
        }
        data.clip_len = len;
    }
    let input = ctx.path(input);
    let recs = load_corpus(&input)?;
    let stats: Option<NormStats> = stats_in.map(|p| read_json(&ctx.path(p))).transpose()?;
    let mut set = build_clip_set(&recs, task, &data, ctx.run.seed, stats)?;
    if set.clips.is_empty() {
        return Err(Error::Usage(format!("no {task:?} clips could be cut from the recordings")));
    }
    let canonical = std::fs::canonicalize(&input).map_err(Error::io(&input))?;
    set.recordings = Some(canonical.to_string_lossy().into_owned());
    save_clip_set(&set, &ctx.path(out))?;
    if let Some(p) = stats_out {
        write_json(&ctx.path(p), &set.stats)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GraphExport<'a> {
    nodes: &'a [String],
    directed: bool,
    /// Dense row-major `nodes × nodes`.
    weights: &'a [f64],
    coords: &'a [[f64; 3]],
}

fn graph(ctx: &Ctx, spec: GraphSpec, clip: Option<&str>, out: &Path) -> Result<()> {
    let (channels, graph): (Vec<String>, EegGraph) = match spec {
        GraphSpec::Correlation { tau, lags } => {
            let arg = clip.ok_or_else(|| Error::Usage("correlation graphs need --clip archive#index".into()))?;
            let (file, index) = arg
                .rsplit_once('#')
                .and_then(|(f, i)| Some((f, i.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Usage(format!("--clip {arg:?} is not archive#index")))?;
            let set = load_clip_set(&ctx.path(Path::new(file)))?;
            let rec = set
                .clips
                .get(index)
                .ok_or_else(|| Error::Usage(format!("clip {index} out of range ({} clips)", set.clips.len())))?;
            let g = build_correlation_graph(&rec.clip, tau, lags)?;
            (set.channels, g)
        }
        _ => {
            if clip.is_some() {
                return Err(Error::Usage("--clip applies to correlation graphs only".into()));
            }
            let channels = ctx.run.synth_channels();
            let g = spec.fixed_graph(&channels)?.expect("distance graphs are fixed");
            (channels, g)
        }
    };
    let layout = layout_for(&channels)?;
    let export =
        GraphExport { nodes: &channels, directed: graph.directed, weights: &graph.weights, coords: &layout.coords };
    write_json(&ctx.path(out), &export)
}

#[derive(Serialize)]
struct TrainOutput<'a> {
    config: Value,
    task: &'a str,
    model: &'a eegraph_core::model::ModelConfig,
    n_params: usize,
    pretrained_init: bool,
    aux_lambda: Option<f64>,
    train: &'a eegraph_core::training::TrainReport,
}

fn save_trained(ctx: &Ctx, t: &pipeline::Trained, out: &Path) -> Result<()> {
    save_weights(&t.model, &t.meta, &ctx.path(out))
}

fn n_params(model: &Model) -> usize {
    model.params.iter().map(|(_, _, t)| t.data.len()).sum()
}

fn pretrain(ctx: &Ctx, clips: &Path, out: &Path, report: Option<&Path>) -> Result<()> {
    let set = load_clip_set(&ctx.path(clips))?;
    let progress = ctx.progress();
    let opts = StageOptions { progress: progress.as_ref().map(|f| f as _), ..Default::default() };
    let t = pipeline::pretrain(&ctx.run, &set, opts)?;
    save_trained(ctx, &t, out)?;
    ctx.emit(
        report,
        &TrainOutput {
            config: ctx.config_value(),
            task: "pretrain",
            model: &t.model.config,
            n_params: n_params(&t.model),
            pretrained_init: false,
            aux_lambda: None,
            train: &t.report,
        },
    )
}

fn train(
    ctx: &Ctx,
    task: TrainTask,
    clips: &Path,
    out: &Path,
    init: Option<&Path>,
    aux_lambda: Option<f64>,
    report: Option<&Path>,
) -> Result<()> {
    let set = load_clip_set(&ctx.path(clips))?;
    if set.task != ClipTask::from(task) {
        return Err(Error::Usage(format!("--task {task:?} but the archive holds {:?} clips", set.task)));
    }
    let init_model = init.map(|p| load_weights(&ctx.path(p)).map(|(m, _)| m)).transpose()?;
    let stage = match task {
        TrainTask::Detect => &ctx.run.detect,
        TrainTask::Classify => &ctx.run.classify,
    };
    let recordings = if stage.augment {
        let dir = set
            .recordings
            .as_deref()
            .ok_or_else(|| Error::Config("augmentation needs the archive's source recordings".into()))?;
        let recs = load_corpus(Path::new(dir))?;
        Some(
            recs.iter()
                .map(|r| {
                    if r.sample_rate == ctx.run.data.sample_rate {
                        Ok(r.clone())
                    } else {
                        resample_recording(r, ctx.run.data.sample_rate)
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let progress = ctx.progress();
    let opts = StageOptions {
        init: init_model.as_ref(),
        aux_lambda,
        recordings: recordings.as_deref(),
        progress: progress.as_ref().map(|f| f as _),
    };
    let t = pipeline::train_task(&ctx.run, &set, opts)?;
    save_trained(ctx, &t, out)?;
    ctx.emit(
        report,
        &TrainOutput {
            config: ctx.config_value(),
            task: match task {
                TrainTask::Detect => "detect",
                TrainTask::Classify => "classify",
            },
            model: &t.model.config,
            n_params: n_params(&t.model),
            pretrained_init: init_model.is_some(),
            aux_lambda,
            train: &t.report,
        },
    )
}

fn eval(
    ctx: &Ctx,
    weights: &Path,
    clips: &Path,
    split: Split,
    threshold: Threshold,
    report: Option<&Path>,
) -> Result<()> {
    let (model, meta) = load_weights(&ctx.path(weights))?;
    let set = load_clip_set(&ctx.path(clips))?;
    let r = pipeline::evaluate(&model, &meta, &set, split, threshold)?;
    ctx.emit(report, &json!({"config": ctx.config_value(), "trained_with": meta.run, "eval": r}))
}

fn interpret(
    ctx: &Ctx,
    weights: &Path,
    clips: &Path,
    task: TrainTask,
    out: &Path,
    split: Split,
    limit: Option<usize>,
) -> Result<()> {
    let (model, meta) = load_weights(&ctx.path(weights))?;
    let set = load_clip_set(&ctx.path(clips))?;
    if set.task != ClipTask::from(task) {
        return Err(Error::Usage(format!("--task {task:?} but the archive holds {:?} clips", set.task)));
    }
    let r = pipeline::interpret(&model, &meta, &set, split, &ctx.run, limit)?;
    let out = ctx.path(out);
    let layout = layout_for(&set.channels)?;
    for c in &r.clips {
        let map = c.map.as_ref().expect("maps are kept until export");
        let overlay = Overlay::new(map, &set.channels)?;
        export_overlay(&out, &format!("clip_{:04}", c.index), &overlay, &layout, c.graph.as_ref())?;
    }
    write_json(&out.join("summary.json"), &json!({"config": ctx.config_value(), "interpret": r}))
}

impl RunConfig {
    /// Channels of the synthetic montage.
    fn synth_channels(&self) -> Vec<String> {
        eegraph_core::ingest::standard_channel_names()
    }
}
