//! EEG graphs: the fixed electrode-distance graph, per-clip correlation
//! graphs and the transition/Laplacian operators consumed by the graph
//! convolutions.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use serde::{Deserialize, Serialize};

use crate::fft::{correlation_len, cross_correlation, PaddedSpectrum};
use crate::ingest::STANDARD_CHANNELS;
use crate::linalg;
use crate::preprocess::EegClip;
use crate::{Error, Result};

/// Default sparsity threshold of the distance graph.
pub const DEFAULT_KAPPA: f64 = 0.9;

/// Idealized spherical 10-20 positions as (polar angle from the vertex,
/// azimuth) in degrees; negative polar angles sit on the left hemisphere.
const SPHERICAL_10_20: [(f64, f64); 19] = [
    (-92.0, -72.0), // Fp1
    (92.0, 72.0),   // Fp2
    (-60.0, -51.0), // F3
    (60.0, 51.0),   // F4
    (-46.0, 0.0),   // C3
    (46.0, 0.0),    // C4
    (-60.0, 51.0),  // P3
    (60.0, -51.0),  // P4
    (-92.0, 72.0),  // O1
    (92.0, -72.0),  // O2
    (-92.0, -36.0), // F7
    (92.0, 36.0),   // F8
    (-92.0, 0.0),   // T3
    (92.0, 0.0),    // T4
    (-92.0, 36.0),  // T5
    (92.0, -36.0),  // T6
    (45.0, 90.0),   // Fz
    (0.0, 0.0),     // Cz
    (45.0, -90.0),  // Pz
];

/// Electrode names and unit-sphere positions (x: right, y: nose, z: vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub names: Vec<String>,
    pub coords: Vec<[f64; 3]>,
}

impl ElectrodeLayout {
    /// The canonical 19-electrode 10-20 layout.
    pub fn standard() -> Self {
        let coords = SPHERICAL_10_20
            .iter()
            .map(|&(theta, phi)| {
                let (t, p) = (theta.to_radians(), phi.to_radians());
                [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
            })
            .collect();
        Self { names: STANDARD_CHANNELS.iter().map(|s| s.to_string()).collect(), coords }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    /// `count` electrodes closest to `center` (itself first), ties by index.
    pub fn nearest(&self, center: usize, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.distance(center, a).total_cmp(&self.distance(center, b)).then(a.cmp(&b)));
        idx.truncate(count);
        idx
    }

    /// Population standard deviation of the N(N−1)/2 pairwise distances.
    pub fn distance_std(&self) -> f64 {
        let n = self.len();
        let d: Vec<f64> =
            (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| self.distance(i, j)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
    }
}

/// Weighted adjacency over `n_nodes` nodes, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegGraph {
    pub n_nodes: usize,
    pub weights: Vec<f64>,
    pub directed: bool,
}

impl EegGraph {
    pub fn new(n_nodes: usize, weights: Vec<f64>, directed: bool) -> Result<Self> {
        if weights.len() != n_nodes * n_nodes {
            return Err(Error::Shape(format!("{} weights for {n_nodes} nodes", weights.len())));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        Ok(Self { n_nodes, weights, directed })
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n_nodes + j]
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                w[i * n + j] = self.weight(perm[i], perm[j]);
            }
        }
        Self { n_nodes: n, weights: w, directed: self.directed }
    }
}

/// Thresholded Gaussian kernel on electrode distances:
/// `exp(−d²/σ²)` when `d ≤ κ`, otherwise 0, with σ the spread of all
/// pairwise distances.
pub fn build_distance_graph(layout: &ElectrodeLayout, kappa: f64) -> Result<EegGraph> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let n = layout.len();
    let sigma = layout.distance_std();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = layout.distance(i, j);
            if d <= kappa {
                w[i * n + j] = (-(d * d) / (sigma * sigma)).exp();
            }
        }
    }
    EegGraph::new(n, w, false)
}

/// Dense Gaussian kernel with fixed bandwidth `h`:
/// `exp(−d²/(2h²)) / √(2πh²)`.
pub fn build_distance_graph_bandwidth(layout: &ElectrodeLayout, bandwidth: f64) -> Result<EegGraph> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = layout.len();
    let h2 = bandwidth * bandwidth;
    let norm = 1.0 / (2.0 * core::f64::consts::PI * h2).sqrt();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = layout.distance(i, j);
            w[i * n + j] = norm * (-(d * d) / (2.0 * h2)).exp();
        }
    }
    EegGraph::new(n, w, false)
}

/// How the normalized cross-correlation treats time lags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LagMode {
    /// Maximum absolute normalized correlation over every integer lag.
    #[default]
    AllLags,
    /// Zero-lag normalized inner product only.
    ZeroLag,
}

/// Per-channel feature vectors of the valid part of a clip, flattened
/// time-major (`x_i[t·M + m] = X[t, i, m]`).
pub fn channel_vectors(clip: &EegClip) -> Vec<Vec<f64>> {
    let (n, m) = (clip.n_channels, clip.n_features);
    (0..n)
        .map(|i| {
            let mut v = Vec::with_capacity(clip.valid_len * m);
            for t in 0..clip.valid_len {
                v.extend_from_slice(clip.row(t, i));
            }
            v
        })
        .collect()
}

/// Dense matrix of absolute normalized cross-correlations between channels
/// (before top-τ sparsification). The diagonal is 1 for nonzero channels.
pub fn correlation_matrix(clip: &EegClip, lags: LagMode) -> Vec<f64> {
    let vecs = channel_vectors(clip);
    let n = vecs.len();
    let len = vecs.first().map_or(0, Vec::len);
    let norms: Vec<f64> = vecs.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut c = vec![0.0; n * n];
    let spectra: Vec<PaddedSpectrum> = match lags {
        LagMode::AllLags => {
            let p = correlation_len(len);
            vecs.iter().map(|v| PaddedSpectrum::new(v, p)).collect()
        }
        LagMode::ZeroLag => Vec::new(),
    };
    for i in 0..n {
        for j in i..n {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue;
            }
            let raw = match lags {
                LagMode::ZeroLag => vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum::<f64>().abs(),
                LagMode::AllLags => cross_correlation(&spectra[i], &spectra[j], len)
                    .into_iter()
                    .fold(0.0, |acc: f64, x| acc.max(x.abs())),
            };
            let v = (raw / (norms[i] * norms[j])).min(1.0);
            c[i * n + j] = v;
            c[j * n + i] = v;
        }
    }
    c
}

/// Keeps, for each row, the `tau` largest off-diagonal entries (ties by
/// lower column index) and sets the diagonal to 1. Rows hold out-edges.
pub fn keep_top_neighbors(corr: &[f64], n: usize, tau: usize) -> Vec<f64> {
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut cand: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        cand.sort_by(|&a, &b| corr[i * n + b].total_cmp(&corr[i * n + a]).then(a.cmp(&b)));
        for &j in cand.iter().take(tau) {
            w[i * n + j] = corr[i * n + j];
        }
        w[i * n + i] = 1.0;
    }
    w
}

/// Directed per-clip graph from top-τ absolute normalized
/// cross-correlations, plus self-edges.
pub fn build_correlation_graph(clip: &EegClip, tau: usize, lags: LagMode) -> Result<EegGraph> {
    if tau == 0 {
        return Err(Error::InvalidArgument("tau must be at least 1".into()));
    }
    let n = clip.n_channels;
    let corr = correlation_matrix(clip, lags);
    EegGraph::new(n, keep_top_neighbors(&corr, n, tau), true)
}

/// Transition matrices and (for undirected graphs) Laplacians of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOperators {
    pub n_nodes: usize,
    pub directed: bool,
    /// `D_O⁻¹ W`.
    pub out_transition: Vec<f64>,
    /// `D_I⁻¹ Wᵀ`.
    pub in_transition: Vec<f64>,
    /// `D^{-1/2} (D − W) D^{-1/2}`, undirected graphs only.
    pub laplacian: Option<Vec<f64>>,
    /// `(2/λ_max) L − I`, undirected graphs only.
    pub scaled_laplacian: Option<Vec<f64>>,
    pub lambda_max: Option<f64>,
}

impl GraphOperators {
    pub fn scaled_laplacian(&self) -> Result<&[f64]> {
        self.scaled_laplacian.as_deref().ok_or(Error::DirectedGraph)
    }

    /// Operators of the relabeled graph (see [`EegGraph::permuted`]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_nodes;
        let p = |m: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = m[perm[i] * n + perm[j]];
                }
            }
            out
        };
        Self {
            n_nodes: n,
            directed: self.directed,
            out_transition: p(&self.out_transition),
            in_transition: p(&self.in_transition),
            laplacian: self.laplacian.as_deref().map(p),
            scaled_laplacian: self.scaled_laplacian.as_deref().map(p),
            lambda_max: self.lambda_max,
        }
    }
}

pub fn graph_operators(g: &EegGraph) -> Result<GraphOperators> {
    let n = g.n_nodes;
    let w = &g.weights;
    let out_deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j]).sum()).collect();
    let in_deg: Vec<f64> = (0..n).map(|j| (0..n).map(|i| w[i * n + j]).sum()).collect();
    if let Some(i) = (0..n).find(|&i| out_deg[i] <= 0.0 || in_deg[i] <= 0.0) {
        return Err(Error::IsolatedNode(i));
    }
    let mut out_t = vec![0.0; n * n];
    let mut in_t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out_t[i * n + j] = w[i * n + j] / out_deg[i];
            in_t[i * n + j] = w[j * n + i] / in_deg[i];
        }
    }
    let (laplacian, scaled, lambda_max) = if g.directed {
        (None, None, None)
    } else {
        let inv_sqrt: Vec<f64> = out_deg.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dw = if i == j { out_deg[i] - w[i * n + j] } else { -w[i * n + j] };
                l[i * n + j] = inv_sqrt[i] * dw * inv_sqrt[j];
            }
        }
        // symmetrize rounding noise
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (l[i * n + j] + l[j * n + i]);
                l[i * n + j] = avg;
                l[j * n + i] = avg;
            }
        }
        let (vals, _) = linalg::symmetric_eigen(&l, n);
        let lmax = vals.last().copied().unwrap_or(0.0);
        if !(lmax > 1e-12) {
            return Err(Error::InvalidArgument("Laplacian has no positive eigenvalue".into()));
        }
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = 2.0 / lmax * l[i * n + j] - if i == j { 1.0 } else { 0.0 };
            }
        }
        (Some(l), Some(s), Some(lmax))
    };
    Ok(GraphOperators {
        n_nodes: n,
        directed: g.directed,
        out_transition: out_t,
        in_transition: in_t,
        laplacian,
        scaled_laplacian: scaled,
        lambda_max,
    })
}
