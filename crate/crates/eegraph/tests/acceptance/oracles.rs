//! Criteria checked against independent reference computations.

use eegraph_core::evaluation::{auroc, classification_metrics, confusion, weighted_f1};
use eegraph_core::graph::{build_correlation_graph, graph_operators, EegGraph, GraphOperators, LagMode};
use eegraph_core::ingest::AnnotationMask;
use eegraph_core::interpret::{coverage, localization, OcclusionMap};
use eegraph_core::model::{self, ConvKind, Model, ModelConfig, Supports, Task};
use eegraph_core::preprocess::EegClip;
use eegraph_core::tensor::{Tape, Tensor, Var};
use eegraph_core::training::cosine_lr;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted graph with self-loops and a ring plus random extra edges.
fn random_graph(n: usize, directed: bool, rng: &mut ChaCha8Rng) -> EegGraph {
    let mut w = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || j == (i + 1) % n || rng.random::<f64>() < 0.4 {
                w[i * n + j] = rng.random_range(0.1..1.0);
            }
        }
    }
    if !directed {
        for i in 0..n {
            for j in 0..i {
                let v = w[i * n + j].max(w[j * n + i]);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
    }
    EegGraph::new(n, w, directed).unwrap()
}

fn random_clip(t: usize, n: usize, m: usize, label: Option<usize>, rng: &mut ChaCha8Rng) -> EegClip {
    let f = (0..t * n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    EegClip::new(t, n, m, t, f, label).unwrap()
}

// ---- 1: gradients ----

const EPS: f64 = 1e-5;

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
}

fn worst_error(model: &Model, loss: &dyn Fn(&Model, &mut Tape) -> Var) -> (f64, String) {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l, model.params.len()).unwrap();
    let eval = |m: &Model| {
        let mut t = Tape::no_grad();
        let v = loss(m, &mut t);
        t.value(v).item()
    };
    let mut worst = (0.0, String::new());
    for id in model.params.ids() {
        let analytic = grads.get(id).expect("every parameter reaches the loss");
        for k in 0..model.params.get(id).len() {
            let mut plus = model.clone();
            plus.params.get_mut(id).data[k] += EPS;
            let mut minus = model.clone();
            minus.params.get_mut(id).data[k] -= EPS;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let e = rel_err(analytic.data[k], fd);
            if e > worst.0 {
                worst = (e, format!("{}[{k}]", model.params.name(id)));
            }
        }
    }
    worst
}

fn small_config(conv: ConvKind, task: Task) -> ModelConfig {
    ModelConfig {
        conv_kind: conv,
        k: 2,
        layers: 2,
        hidden: 7,
        input_dim: 6,
        dropout_head: 0.0,
        task,
        aux_horizon: None,
    }
}

fn gradient_batch(directed: bool, seed: u64) -> (Vec<EegClip>, Vec<GraphOperators>) {
    let mut r = rng(seed);
    let clips = vec![random_clip(4, 5, 6, Some(1), &mut r), random_clip(4, 5, 6, Some(0), &mut r)];
    let ops = (0..2).map(|_| graph_operators(&random_graph(5, directed, &mut r)).unwrap()).collect();
    (clips, ops)
}

fn detector_error(conv: ConvKind, directed: bool, seed: u64) -> (f64, String) {
    let (clips, ops) = gradient_batch(directed, seed);
    let model = Model::init(small_config(conv, Task::Detect), seed + 1).unwrap();
    let loss = |m: &Model, tape: &mut Tape| {
        let c: Vec<&EegClip> = clips.iter().collect();
        let o: Vec<&GraphOperators> = ops.iter().collect();
        let z = m.logits(tape, &c, &o, None).unwrap();
        tape.bce_with_logits(z, &[1.0, 0.0]).unwrap()
    };
    worst_error(&model, &loss)
}

fn pretrainer_error(seed: u64) -> (f64, String) {
    let (clips, ops) = gradient_batch(true, seed);
    let mut r = rng(seed + 1);
    let teach: Vec<EegClip> = (0..2).map(|_| random_clip(3, 5, 6, None, &mut r)).collect();
    let model = Model::init(small_config(ConvKind::Diffusion, Task::Pretrain { horizon: 3 }), seed + 2).unwrap();
    let predict = |m: &Model, tape: &mut Tape| -> Var {
        let c: Vec<&EegClip> = clips.iter().collect();
        let y: Vec<&EegClip> = teach.iter().collect();
        let o: Vec<&GraphOperators> = ops.iter().collect();
        let bound = m.bind(tape).unwrap();
        let sup = Supports::new(tape, ConvKind::Diffusion, 2, &o).unwrap();
        let enc = model::encode(tape, &bound.encoder, &sup, &c, None).unwrap();
        let preds = model::decode(tape, &bound, &sup, &enc.last, 3, Some(&y)).unwrap();
        let flat: Vec<Var> = preds
            .iter()
            .map(|&p| {
                let n = tape.value(p).len();
                tape.reshape(p, vec![1, n]).unwrap()
            })
            .collect();
        tape.concat(&flat).unwrap()
    };
    // targets a little off the current predictions keep every |·| away from
    // its kink during the finite-difference step
    let mut tape = Tape::no_grad();
    let p0 = predict(&model, &mut tape);
    let target: Vec<f64> = tape
        .value(p0)
        .data
        .iter()
        .map(|p| {
            let d = 0.005 + 0.005 * r.random::<f64>();
            if r.random::<bool>() {
                p + d
            } else {
                p - d
            }
        })
        .collect();
    let mask = vec![1.0; target.len()];
    let loss = |m: &Model, tape: &mut Tape| {
        let stacked = predict(m, tape);
        tape.masked_l1(stacked, &target, &mask).unwrap()
    };
    worst_error(&model, &loss)
}

pub fn gradients() -> Outcome {
    let runs = [
        ("diffusion detector", detector_error(ConvKind::Diffusion, true, 101)),
        ("chebyshev detector", detector_error(ConvKind::Chebyshev, false, 103)),
        ("seq2seq pretrainer", pretrainer_error(105)),
    ];
    let pass = runs.iter().all(|(_, (e, _))| *e < 1e-4);
    let detail = runs.iter().map(|(n, (e, at))| format!("{n} {e:.2e} at {at}")).collect::<Vec<_>>().join("; ");
    Outcome::new(pass, format!("worst relative error: {detail} (limit 1e-4)"))
}

// ---- 2 and 3: graph convolutions ----

fn dense(n: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, cols, v)
}

fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn conv(kind: ConvKind, k: usize, ops: &GraphOperators, x: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut tape = Tape::no_grad();
    let sup = Supports::new(&mut tape, kind, k, &[ops]).unwrap();
    let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
    let xv = tape.constant(Tensor::new(vec![x.nrows(), x.ncols()], row_major(x)).unwrap()).unwrap();
    let tv = tape.constant(Tensor::new(vec![theta.nrows(), theta.ncols()], row_major(theta)).unwrap()).unwrap();
    let y = sup.conv(&mut tape, xv, tv).unwrap();
    dense(x.nrows(), theta.ncols(), &tape.value(y).data)
}

fn block(theta: &DMatrix<f64>, s: usize, d: usize) -> DMatrix<f64> {
    theta.rows(s * d, d).into_owned()
}

fn chebyshev_oracle(g: &EegGraph, k: usize, x: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.n_nodes;
    let w = dense(n, n, &g.weights);
    let deg = w.column_sum();
    let s = DMatrix::from_diagonal(&deg.map(|v| 1.0 / v.sqrt()));
    let l = &s * (DMatrix::from_diagonal(&deg) - &w) * &s;
    let eig = SymmetricEigen::new(l);
    let lmax = eig.eigenvalues.max();
    let scaled = eig.eigenvalues.map(|v| (2.0 * v / lmax - 1.0).clamp(-1.0, 1.0));
    let phi = &eig.eigenvectors;
    let d = x.ncols();
    let mut y = DMatrix::zeros(n, theta.ncols());
    for step in 0..k {
        let t = DMatrix::from_diagonal(&scaled.map(|v| (step as f64 * v.acos()).cos()));
        y += phi * t * phi.transpose() * x * block(theta, step, d);
    }
    y
}

fn diffusion_oracle(g: &EegGraph, k: usize, x: &DMatrix<f64>, theta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.n_nodes;
    let w = dense(n, n, &g.weights);
    let d_out = DMatrix::from_diagonal(&w.column_sum().map(|v| 1.0 / v));
    let d_in = DMatrix::from_diagonal(&w.row_sum().transpose().map(|v| 1.0 / v));
    let p_out = &d_out * &w;
    let p_in = &d_in * w.transpose();
    let d = x.ncols();
    let mut y = DMatrix::zeros(n, theta.ncols());
    for step in 0..k {
        y += p_out.pow(step as u32) * x * block(theta, step, d);
        y += p_in.pow(step as u32) * x * block(theta, k + step, d);
    }
    y
}

pub fn chebyshev_spectral() -> Outcome {
    let mut r = rng(201);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let k = r.random_range(1..=4);
        let (d, h) = (r.random_range(1..=4), r.random_range(1..=4));
        let g = random_graph(n, false, &mut r);
        let ops = graph_operators(&g).unwrap();
        let x = random_matrix(n, d, &mut r);
        let theta = random_matrix(k * d, h, &mut r);
        let diff = (conv(ConvKind::Chebyshev, k, &ops, &x, &theta) - chebyshev_oracle(&g, k, &x, &theta)).abs().max();
        worst = worst.max(diff);
    }
    Outcome::new(worst < 1e-8, format!("50 undirected graphs, max abs diff {worst:.2e} (limit 1e-8)"))
}

pub fn diffusion_powers() -> Outcome {
    let mut r = rng(301);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.random_range(2..=8);
        let k = r.random_range(1..=3);
        let (d, h) = (r.random_range(1..=4), r.random_range(1..=4));
        let g = random_graph(n, true, &mut r);
        let ops = graph_operators(&g).unwrap();
        let x = random_matrix(n, d, &mut r);
        let theta = random_matrix(2 * k * d, h, &mut r);
        let diff = (conv(ConvKind::Diffusion, k, &ops, &x, &theta) - diffusion_oracle(&g, k, &x, &theta)).abs().max();
        worst = worst.max(diff);
    }
    // K = 1: X·θ_{0,1} + X·θ_{0,2}, whatever the graph
    let mut single_exact = true;
    let mut factored: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(2..=8);
        let (d, h) = (r.random_range(1..=4), r.random_range(1..=4));
        let x = random_matrix(n, d, &mut r);
        let theta = random_matrix(2 * d, h, &mut r);
        let running = DMatrix::from_fn(n, h, |i, c| {
            let mut acc = 0.0;
            for s in 0..2 {
                for j in 0..d {
                    acc += x[(i, j)] * theta[(s * d + j, c)];
                }
            }
            acc
        });
        for _ in 0..2 {
            let ops = graph_operators(&random_graph(n, true, &mut r)).unwrap();
            let y = conv(ConvKind::Diffusion, 1, &ops, &x, &theta);
            single_exact &= y == running;
            factored = factored.max((y - &x * (block(&theta, 0, d) + block(&theta, 1, d))).abs().max());
        }
    }
    Outcome::new(
        worst < 1e-10 && single_exact && factored < 1e-14,
        format!(
            "50 directed graphs, max abs diff {worst:.2e} (limit 1e-10); K=1 bitwise equal to the summed linear map on 40 graphs: {single_exact}, {factored:.1e} from X(θ01+θ02)"
        ),
    )
}

// ---- 4: correlation graph ----

fn all_lags(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len() as isize;
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for lag in -(len - 1)..len {
        let mut s = 0.0;
        for t in 0..len {
            let u = t + lag;
            if (0..len).contains(&u) {
                s += a[u as usize] * b[t as usize];
            }
        }
        best = best.max(s.abs());
    }
    (best / (na * nb)).min(1.0)
}

fn brute_force_graph(clip: &EegClip, tau: usize) -> Vec<f64> {
    let n = clip.n_channels;
    let vecs: Vec<Vec<f64>> =
        (0..n).map(|i| (0..clip.valid_len).flat_map(|t| clip.row(t, i).to_vec()).collect()).collect();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let corr: Vec<f64> = (0..n).map(|j| all_lags(&vecs[i], &vecs[j])).collect();
        let mut taken = vec![false; n];
        taken[i] = true;
        for _ in 0..tau.min(n - 1) {
            let mut pick: Option<usize> = None;
            for j in 0..n {
                if !taken[j] && pick.is_none_or(|p| corr[j] > corr[p]) {
                    pick = Some(j);
                }
            }
            let j = pick.unwrap();
            taken[j] = true;
            w[i * n + j] = corr[j];
        }
        w[i * n + i] = 1.0;
    }
    w
}

pub fn correlation_graph() -> Outcome {
    let mut r = rng(401);
    let mut worst: f64 = 0.0;
    let mut same_pattern = true;
    for _ in 0..100 {
        let clip = random_clip(4, 6, 8, None, &mut r);
        let g = build_correlation_graph(&clip, 2, LagMode::AllLags).unwrap();
        for (a, b) in g.weights.iter().zip(brute_force_graph(&clip, 2)) {
            same_pattern &= (*a == 0.0) == (b == 0.0);
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::new(
        worst < 1e-10 && same_pattern,
        format!("100 clips, max abs diff {worst:.2e} (limit 1e-10), identical sparsity: {same_pattern}"),
    )
}

// ---- 5: coverage and localization ----

fn random_pair(r: &mut ChaCha8Rng) -> (OcclusionMap, AnnotationMask) {
    let n = r.random_range(1..=8);
    let t = r.random_range(1..=12);
    let raw = (0..n * t).map(|_| r.random_range(0..9) as f64).collect();
    let map = OcclusionMap::from_raw(n, t, raw).unwrap();
    let p = r.random_range(0.05..0.9);
    let mut grid: Vec<u8> = (0..n * t).map(|_| u8::from(r.random_bool(p))).collect();
    if grid.iter().all(|&g| g == 0) {
        grid[r.random_range(0..n * t)] = 1;
    }
    (map, AnnotationMask { n_channels: n, n_seconds: t, grid })
}

pub fn coverage_localization() -> Outcome {
    let mut r = rng(501);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (map, annot) = random_pair(&mut r);
        let (mut hits, mut annotated, mut salient) = (0usize, 0usize, 0usize);
        for ch in 0..map.n_channels {
            for s in 0..map.n_steps {
                let on = map.values[ch * map.n_steps + s] > 0.5;
                let a = annot.grid[ch * annot.n_seconds + s] == 1;
                hits += usize::from(on && a);
                annotated += usize::from(a);
                salient += usize::from(on);
            }
        }
        let cov = coverage(&map, &annot).unwrap();
        let loc = localization(&map, &annot).unwrap();
        let want_loc = if salient == 0 { 0.0 } else { hits as f64 / salient as f64 };
        if cov != hits as f64 / annotated as f64 || loc.value != want_loc || loc.degenerate != (salient == 0) {
            mismatches += 1;
        }
    }
    // empty salient set, then an all-ones mask
    let flat = OcclusionMap::from_raw(3, 4, vec![2.5; 12]).unwrap();
    let ones = AnnotationMask { n_channels: 3, n_seconds: 4, grid: vec![1; 12] };
    let empty_ok = coverage(&flat, &ones).unwrap() == 0.0 && {
        let l = localization(&flat, &ones).unwrap();
        l.value == 0.0 && l.degenerate
    };
    let mut all_ones_ok = true;
    for _ in 0..200 {
        let (map, _) = random_pair(&mut r);
        let mask =
            AnnotationMask { n_channels: map.n_channels, n_seconds: map.n_steps, grid: vec![1; map.values.len()] };
        let above = map.values.iter().filter(|&&v| v > 0.5).count();
        all_ones_ok &= coverage(&map, &mask).unwrap() == above as f64 / map.values.len() as f64;
        all_ones_ok &= above == 0 || localization(&map, &mask).unwrap().value == 1.0;
    }
    Outcome::new(
        mismatches == 0 && empty_ok && all_ones_ok,
        format!(
            "{mismatches} mismatches over 1000 pairs; empty salient set gives 0: {empty_ok}; all-ones mask gives localization 1: {all_ones_ok}"
        ),
    )
}

// ---- 6: metrics ----

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn metrics() -> Outcome {
    let mut r = rng(601);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let labels: Vec<bool> = (0..200).map(|_| r.random_bool(0.4)).collect();
        let scores: Vec<f64> = labels
            .iter()
            .map(|&l| ((r.random_range(0.0..1.0f64) + if l { 0.3 } else { 0.0 }) * 20.0).round() / 20.0)
            .collect();
        worst = worst.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
    }
    let f1 = weighted_f1(&[0, 0, 0, 2], &[0, 0, 0, 1], 3).unwrap();
    let mut row_err: f64 = 0.0;
    for _ in 0..50 {
        let k = r.random_range(2..=5);
        let labels: Vec<usize> = (0..60).map(|_| r.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..60).map(|_| r.random_range(0..k)).collect();
        let cm = confusion(&preds, &labels, k).unwrap();
        let norm = classification_metrics(&preds, &labels, k).unwrap().normalized_confusion;
        for c in 0..k {
            if cm.support(c) > 0 {
                row_err = row_err.max((norm[c * k..(c + 1) * k].iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Outcome::new(
        worst < 1e-12 && f1 == 0.75 && row_err < 1e-12,
        format!("AUROC vs pairwise counts {worst:.1e} (limit 1e-12); weighted F1 hand case {f1}; max row-sum error {row_err:.1e}"),
    )
}

// ---- 7: cosine schedule ----

pub fn cosine_schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    for (lr_max, lr_min, total) in
        [(1e-4, 0.0, 100), (3e-4, 1e-6, 60), (5e-4, 5e-5, 350), (1.0, 0.25, 2), (2e-3, 0.0, 1000)]
    {
        worst = worst.max((cosine_lr(0, total, lr_max, lr_min) - lr_max).abs());
        worst = worst.max((cosine_lr(total, total, lr_max, lr_min) - lr_min).abs());
        worst = worst.max((cosine_lr(total / 2, total, lr_max, lr_min) - (lr_max + lr_min) / 2.0).abs());
    }
    Outcome::new(worst <= 1e-15, format!("max deviation at 0, T/2 and T: {worst:.1e} (limit 1e-15)"))
}
