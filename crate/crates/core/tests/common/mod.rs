#![allow(dead_code)]

use eegraph_core::graph::{graph_operators, EegGraph, GraphOperators};
use eegraph_core::preprocess::EegClip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random weighted graph with self-loops and a ring, so every node has in-
/// and out-edges.
pub fn random_graph(n: usize, directed: bool, rng: &mut ChaCha8Rng) -> EegGraph {
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

pub fn random_ops(n: usize, directed: bool, rng: &mut ChaCha8Rng) -> GraphOperators {
    graph_operators(&random_graph(n, directed, rng)).unwrap()
}

pub fn random_clip(t: usize, n: usize, m: usize, label: Option<usize>, rng: &mut ChaCha8Rng) -> EegClip {
    let f = (0..t * n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
    EegClip::new(t, n, m, t, f, label).unwrap()
}

pub fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
