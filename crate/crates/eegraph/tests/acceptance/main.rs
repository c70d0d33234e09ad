//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! `EEGRAPH_ACCEPTANCE=1,2,8` restricts the run to the listed criteria.

mod end_to_end;
mod oracles;
mod smoke;

use std::time::Instant;

pub struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("EEGRAPH_ACCEPTANCE").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let only = selected();
    let wanted = |n: u32| only.as_ref().is_none_or(|v| v.contains(&n));
    let mut failed = 0;
    let mut run = |n: u32, name: &str, check: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Outcome::new(false, "panicked"));
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!outcome.pass);
        println!("criterion {n:>2} {verdict}  {name}: {} [{:.1}s]", outcome.detail, start.elapsed().as_secs_f64());
    };
    run(1, "gradient correctness", &mut oracles::gradients);
    run(2, "chebyshev spectral equivalence", &mut oracles::chebyshev_spectral);
    run(3, "diffusion matrix-power equivalence", &mut oracles::diffusion_powers);
    run(4, "correlation graph oracle", &mut oracles::correlation_graph);
    run(5, "coverage and localization oracle", &mut oracles::coverage_localization);
    run(6, "metric oracles", &mut oracles::metrics);
    run(7, "cosine schedule", &mut oracles::cosine_schedule);
    let corpus = [8, 9, 10].into_iter().any(wanted).then(end_to_end::Corpus::build);
    let corpus = || corpus.as_ref().expect("built when selected");
    run(8, "end-to-end synthetic detection", &mut || end_to_end::detection(corpus()));
    run(9, "pretraining transfer", &mut || end_to_end::transfer(corpus()));
    run(10, "synthetic localization", &mut || end_to_end::localization_gain(corpus()));
    run(11, "auxiliary loss at lambda 0", &mut end_to_end::zero_lambda);
    run(12, "determinism", &mut end_to_end::determinism);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
