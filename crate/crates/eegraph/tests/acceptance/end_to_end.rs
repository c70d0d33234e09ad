//! Criteria that train models on generated recordings.

use std::cell::RefCell;
use std::time::Instant;

use eegraph::config::{GraphSpec, RunConfig};
use eegraph::dataset::{build_clip_set, ClipSet, ClipTask, Split};
use eegraph::pipeline::{self, StageOptions, Threshold, Trained};
use eegraph_core::graph::LagMode;
use eegraph_core::ingest::{generate_synthetic, Recording};
use eegraph_core::interpret::{localization, OcclusionMap};
use eegraph_core::model::Model;
use eegraph_core::rng::{stream_rng, Stream};
use eegraph_core::tensor::Tensor;
use eegraph_core::training::EpochStats;
use rand::seq::SliceRandom;

use crate::smoke::{run_pipeline, OUTPUTS, REPORTS};
use crate::Outcome;

const AUROC_TARGET: f64 = 0.95;
const BUDGET_SECS: f64 = 15.0 * 60.0;

fn desk() -> RunConfig {
    RunConfig::resolve("desk", None, &[], None).unwrap()
}

fn with_graph(run: &RunConfig, graph: GraphSpec) -> RunConfig {
    RunConfig { graph, ..run.clone() }
}

fn corr() -> GraphSpec {
    GraphSpec::Correlation { tau: 3, lags: LagMode::AllLags }
}

fn dist() -> GraphSpec {
    GraphSpec::Distance { kappa: 0.9 }
}

fn test_auroc(t: &Trained, set: &ClipSet) -> f64 {
    let r = pipeline::evaluate(&t.model, &t.meta, set, Split::Test, Threshold::Auto).unwrap();
    r.detection.unwrap().auroc
}

/// The desk corpus and its detection clips, built once.
pub struct Corpus {
    pub run: RunConfig,
    pub recordings: Vec<Recording>,
    pub detect: ClipSet,
    pub prep_secs: f64,
    corr_model: RefCell<Option<Trained>>,
}

impl Corpus {
    pub fn build() -> Self {
        let run = desk();
        let start = Instant::now();
        let recordings = generate_synthetic(&run.synth).unwrap();
        let detect = build_clip_set(&recordings, ClipTask::Detect, &run.data, run.seed, None).unwrap();
        let prep_secs = start.elapsed().as_secs_f64();
        Self { run, recordings, detect, prep_secs, corr_model: RefCell::new(None) }
    }

    fn train(&self, graph: GraphSpec) -> (Trained, f64) {
        let start = Instant::now();
        let run = with_graph(&self.run, graph);
        let opts = StageOptions { recordings: Some(&self.recordings), ..Default::default() };
        let t = pipeline::train_task(&run, &self.detect, opts).unwrap();
        (t, start.elapsed().as_secs_f64())
    }

    fn corr_detector(&self) -> std::cell::Ref<'_, Trained> {
        if self.corr_model.borrow().is_none() {
            let (t, _) = self.train(corr());
            *self.corr_model.borrow_mut() = Some(t);
        }
        std::cell::Ref::map(self.corr_model.borrow(), |m| m.as_ref().unwrap())
    }
}

// ---- 8 ----

pub fn detection(c: &Corpus) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, graph) in [("corr", corr()), ("dist", dist())] {
        let (t, secs) = c.train(graph);
        let start = Instant::now();
        let auc = test_auroc(&t, &c.detect);
        // preprocessing is shared; charge it to each detector
        let total = c.prep_secs + secs + start.elapsed().as_secs_f64();
        pass &= auc >= AUROC_TARGET && total < BUDGET_SECS;
        parts.push(format!(
            "{name} AUROC {auc:.4} in {total:.0}s ({} epochs, best {})",
            t.report.train_loss.len(),
            t.report.best_epoch
        ));
        if name == "corr" {
            *c.corr_model.borrow_mut() = Some(t);
        }
    }
    let n_test = c.detect.split(Split::Test).count();
    Outcome::new(
        pass,
        format!("{} on {n_test} held-out clips (need >= {AUROC_TARGET}, < {BUDGET_SECS:.0}s each)", parts.join("; ")),
    )
}

// ---- 9 ----

const LABELED: usize = 100;

/// `set` with its training split cut to `n` seeded clips.
fn restrict_train(set: &ClipSet, n: usize, seed: u64) -> ClipSet {
    let mut train: Vec<usize> =
        set.clips.iter().enumerate().filter(|(_, c)| c.split == Split::Train).map(|(i, _)| i).collect();
    train.shuffle(&mut stream_rng(seed, Stream::Split, 1));
    train.truncate(n);
    train.sort_unstable();
    let clips = set
        .clips
        .iter()
        .enumerate()
        .filter(|(i, c)| c.split != Split::Train || train.binary_search(i).is_ok())
        .map(|(_, c)| c.clone())
        .collect();
    ClipSet { clips, ..set.clone() }
}

pub fn transfer(c: &Corpus) -> Outcome {
    let run = with_graph(&c.run, dist());
    let pre_set =
        build_clip_set(&c.recordings, ClipTask::Pretrain, &run.data, run.seed, Some(c.detect.stats.clone())).unwrap();
    let start = Instant::now();
    let pre = pipeline::pretrain(&run, &pre_set, StageOptions::default()).unwrap();
    let pre_secs = start.elapsed().as_secs_f64();
    let (mut scratch, mut warm) = (Vec::new(), Vec::new());
    for seed in [11u64, 12, 13] {
        let run = RunConfig { seed, ..run.clone() };
        let set = restrict_train(&c.detect, LABELED, seed);
        let a = pipeline::train_task(&run, &set, StageOptions::default()).unwrap();
        let b =
            pipeline::train_task(&run, &set, StageOptions { init: Some(&pre.model), ..Default::default() }).unwrap();
        scratch.push(test_auroc(&a, &set));
        warm.push(test_auroc(&b, &set));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (s, w) = (mean(&scratch), mean(&warm));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    Outcome::new(
        w >= s - 0.02,
        format!(
            "dist detector on {LABELED} labeled clips: pretrained mean AUROC {w:.4} [{}] vs scratch {s:.4} [{}] (need >= scratch - 0.02; pretraining {pre_secs:.0}s on {} pairs)",
            fmt(&warm),
            fmt(&scratch),
            pre.report.n_train
        ),
    )
}

// ---- 10 ----

const FOCAL_CLIPS: usize = 40;
const PERMUTATIONS: usize = 20;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean localization of `map` with its cells shuffled.
fn permuted_localization(map: &OcclusionMap, annot: &eegraph_core::ingest::AnnotationMask, idx: u64) -> f64 {
    let mut rng = stream_rng(idx, Stream::Augment, 10);
    let mut total = 0.0;
    for _ in 0..PERMUTATIONS {
        let mut shuffled = map.clone();
        shuffled.values.shuffle(&mut rng);
        total += localization(&shuffled, annot).unwrap().value;
    }
    total / PERMUTATIONS as f64
}

pub fn localization_gain(c: &Corpus) -> Outcome {
    let t = c.corr_detector();
    let n = c.detect.channels.len();
    let focal: Vec<_> = c
        .detect
        .split(Split::Test)
        .filter(|r| {
            let a = r.annotation.as_ref().unwrap();
            let involved = (0..n).filter(|&i| (0..a.n_seconds).any(|j| a.get(i, j) != 0)).count();
            involved > 0 && involved < n
        })
        .take(FOCAL_CLIPS)
        .cloned()
        .collect();
    let n_focal = focal.len();
    let set = ClipSet { clips: focal, ..c.detect.clone() };
    let report = pipeline::interpret(&t.model, &t.meta, &set, Split::Test, &c.run, None).unwrap();
    let (mut model_scores, mut baseline) = (Vec::new(), Vec::new());
    for r in report.clips.iter().filter(|r| r.correct) {
        let annot = set.clips[r.index].annotation.as_ref().unwrap();
        model_scores.push(r.localization);
        baseline.push(permuted_localization(r.map.as_ref().unwrap(), annot, r.index as u64));
    }
    if model_scores.is_empty() {
        return Outcome::new(false, format!("no correctly detected focal clip among {n_focal}"));
    }
    let (m, b) = (median(model_scores.clone()), median(baseline));
    Outcome::new(
        m - b >= 0.1,
        format!(
            "corr detector, {} of {n_focal} focal test clips detected: median localization {m:.3} vs permuted maps {b:.3}, gain {:.3} (need >= 0.1)",
            model_scores.len(),
            m - b
        ),
    )
}

// ---- 11 ----

fn trajectory(run: &RunConfig, set: &ClipSet, aux: Option<f64>) -> Vec<Vec<(String, Tensor)>> {
    let seen = RefCell::new(Vec::new());
    let record = |_: &EpochStats, m: &Model| {
        let shared = m
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with("enc.") || name.starts_with("head."))
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect::<Vec<_>>();
        seen.borrow_mut().push(shared);
    };
    let opts = StageOptions { aux_lambda: aux, progress: Some(&record), ..Default::default() };
    pipeline::train_task(run, set, opts).unwrap();
    seen.into_inner()
}

pub fn zero_lambda() -> Outcome {
    let mut run = desk();
    run.synth.n_recordings = 24;
    run.detect.epochs = 3;
    run.detect.patience = 3;
    let recs = generate_synthetic(&run.synth).unwrap();
    let set = build_clip_set(&recs, ClipTask::Detect, &run.data, run.seed, None).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for graph in [corr(), dist()] {
        let run = with_graph(&run, graph);
        let det = trajectory(&run, &set, None);
        let aux = trajectory(&run, &set, Some(0.0));
        let same = !det.is_empty() && det == aux;
        pass &= same;
        lines.push(format!("{:?}: {} epochs, identical {same}", run.conv_kind(), det.len()));
    }
    Outcome::new(
        pass,
        format!("encoder and head parameters after every epoch, lambda 0 vs detection only: {}", lines.join("; ")),
    )
}

// ---- 12 ----

pub fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut times = Vec::new();
    for d in &dirs {
        match run_pipeline(d.path(), 7) {
            Ok(t) => times.push(t.as_secs_f64()),
            Err(e) => return Outcome::new(false, e),
        }
    }
    let missing: Vec<&str> =
        OUTPUTS.iter().copied().filter(|f| !dirs.iter().all(|d| d.path().join(f).exists())).collect();
    let mut compared = 0;
    let mut differing = Vec::new();
    let overlays: Vec<String> = std::fs::read_dir(dirs[0].path().join("maps"))
        .unwrap()
        .map(|e| format!("maps/{}", e.unwrap().file_name().to_string_lossy()))
        .filter(|f| f.ends_with(".json"))
        .collect();
    for f in REPORTS.iter().map(|s| s.to_string()).chain(overlays).chain(["det.w".into(), "cls.w".into()]) {
        let a = std::fs::read(dirs[0].path().join(&f));
        let b = std::fs::read(dirs[1].path().join(&f));
        compared += 1;
        if a.is_err() || a.ok() != b.ok() {
            differing.push(f);
        }
    }
    Outcome::new(
        missing.is_empty() && differing.is_empty(),
        format!(
            "two seeded tiny-preset runs ({:.0}s, {:.0}s): {compared} report, overlay and weight files compared, differing {differing:?}, missing outputs {missing:?}",
            times[0], times[1]
        ),
    )
}
