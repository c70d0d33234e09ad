//! The full command-line pipeline on the tiny preset.

use std::path::Path;
use std::time::{Duration, Instant};

/// Report files written by [`run_pipeline`], relative to its directory.
pub const REPORTS: [&str; 6] = ["pre.json", "det.json", "cls.json", "eval.json", "cls_eval.json", "maps/summary.json"];

/// Every file a successful run must leave behind.
pub const OUTPUTS: [&str; 13] = [
    "recs/synth_spec.json",
    "pre.bin",
    "det.bin",
    "cls.bin",
    "stats.json",
    "pre.w",
    "det.w",
    "cls.w",
    "pre.json",
    "det.json",
    "cls.json",
    "eval.json",
    "maps/summary.json",
];

const STEPS: [&str; 10] = [
    "synth --out recs",
    "preprocess --in recs --task pretrain --out pre.bin",
    "preprocess --in recs --task detect --out det.bin --stats stats.json",
    "preprocess --in recs --task classify --out cls.bin --stats-in stats.json",
    "pretrain --clips pre.bin --out pre.w --report pre.json",
    "train --task detect --clips det.bin --out det.w --init pre.w --report det.json",
    "train --task classify --clips cls.bin --out cls.w --init pre.w --report cls.json",
    "eval --weights det.w --clips det.bin --report eval.json",
    "eval --weights cls.w --clips cls.bin --threshold auto --report cls_eval.json",
    "interpret --weights det.w --clips det.bin --task detect --out maps",
];

/// Runs every step in `dir` with a fixed seed. Returns the elapsed time, or
/// the failing step and its exit code.
pub fn run_pipeline(dir: &Path, seed: u64) -> Result<Duration, String> {
    let start = Instant::now();
    for step in STEPS {
        let mut argv = vec!["eegraph".to_string(), "--preset".into(), "tiny".into(), "--seed".into(), seed.to_string()];
        argv.push("--data-dir".into());
        argv.push(dir.to_string_lossy().into_owned());
        argv.extend(step.split_whitespace().map(str::to_string));
        let code = eegraph::cli::main_with_args(argv);
        if code != 0 {
            return Err(format!("`{step}` exited with {code}"));
        }
    }
    Ok(start.elapsed())
}
