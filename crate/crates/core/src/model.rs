//! Graph convolutions, the DCGRU cell and the detector, classifier and
//! sequence-to-sequence assemblies built from it.
//!
//! A batch of `B` clips over `N` nodes is carried as a `[B·N, D]` matrix;
//! graph operators act block-wise so each clip keeps its own graph.
//!
//! Filter tensors `Θ` are stored as `[(S·D), H]` where `S` is the number of
//! expansion terms (`2K` for diffusion, `K` for Chebyshev) and row `s·D + d`
//! multiplies feature `d` of term `s`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::graph::GraphOperators;
use crate::preprocess::EegClip;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{MatsId, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Bidirectional random-walk diffusion; any graph.
    Diffusion,
    /// Chebyshev polynomials of the scaled Laplacian; undirected graphs.
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Task {
    Detect,
    Classify { n_classes: usize },
    Pretrain { horizon: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv_kind: ConvKind,
    /// Number of expansion terms per direction, powers `0..K`.
    pub k: usize,
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub dropout_head: f64,
    pub task: Task,
    /// Decoder horizon of the auxiliary next-window objective.
    #[serde(default)]
    pub aux_horizon: Option<usize>,
}

impl ModelConfig {
    pub fn detection(conv_kind: ConvKind) -> Self {
        Self {
            conv_kind,
            k: 2,
            layers: 2,
            hidden: 64,
            input_dim: crate::preprocess::N_FEATURES,
            dropout_head: 0.0,
            task: Task::Detect,
            aux_horizon: None,
        }
    }

    pub fn classification(conv_kind: ConvKind, n_classes: usize) -> Self {
        Self { dropout_head: 0.5, task: Task::Classify { n_classes }, ..Self::detection(conv_kind) }
    }

    pub fn pretraining(conv_kind: ConvKind, horizon: usize) -> Self {
        Self { layers: 3, task: Task::Pretrain { horizon }, ..Self::detection(conv_kind) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k < 1 {
            return bad(format!("K must be at least 1, got {}", self.k));
        }
        if self.layers < 1 || self.hidden < 1 || self.input_dim < 1 {
            return bad("layers, hidden and input_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_head) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_head));
        }
        match self.task {
            Task::Classify { n_classes } if n_classes < 2 => return Err(Error::SingleClass),
            Task::Pretrain { horizon: 0 } => return bad("pretraining horizon must be positive".into()),
            _ => {}
        }
        if self.aux_horizon == Some(0) {
            return bad("auxiliary horizon must be positive".into());
        }
        Ok(())
    }

    /// Expansion terms `S` per convolution.
    pub fn n_terms(&self) -> usize {
        match self.conv_kind {
            ConvKind::Diffusion => 2 * self.k,
            ConvKind::Chebyshev => self.k,
        }
    }

    /// Width of the task head (0 when there is none).
    pub fn head_outputs(&self) -> usize {
        match self.task {
            Task::Detect => 1,
            Task::Classify { n_classes } => n_classes,
            Task::Pretrain { .. } => 0,
        }
    }

    pub fn decoder_horizon(&self) -> Option<usize> {
        match self.task {
            Task::Pretrain { horizon } => Some(horizon),
            _ => self.aux_horizon,
        }
    }

    fn layer_input(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    /// Names and shapes of every parameter, in initialization order. The
    /// flag marks decoder-side tensors.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let s = self.n_terms();
        let h = self.hidden;
        let cell = |out: &mut Vec<(String, Vec<usize>, bool)>, prefix: &str, l: usize, din: usize, dec: bool| {
            for gate in ["r", "u", "c"] {
                out.push((format!("{prefix}.{l}.theta_{gate}"), vec![s * (din + h), h], dec));
                out.push((format!("{prefix}.{l}.b_{gate}"), vec![h], dec));
            }
        };
        for l in 0..self.layers {
            cell(&mut out, "enc", l, self.layer_input(l), false);
        }
        let n_out = self.head_outputs();
        if n_out > 0 {
            out.push(("head.w".into(), vec![h, n_out], false));
            out.push(("head.b".into(), vec![n_out], false));
        }
        if self.decoder_horizon().is_some() {
            for l in 0..self.layers {
                cell(&mut out, "dec", l, self.layer_input(l), true);
            }
            out.push(("proj.w".into(), vec![h, self.input_dim], true));
            out.push(("proj.b".into(), vec![self.input_dim], true));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// `T_k(x)` by the three-term recurrence.
pub fn chebyshev_t(k: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if k == 0 {
        return a;
    }
    for _ in 1..k {
        let c = 2.0 * x * b - a;
        a = b;
        b = c;
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIds {
    pub theta_r: ParamId,
    pub b_r: ParamId,
    pub theta_u: ParamId,
    pub b_u: ParamId,
    pub theta_c: ParamId,
    pub b_c: ParamId,
    pub input_dim: usize,
}

/// A configured network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Vec<CellIds>,
    head: Option<(ParamId, ParamId)>,
    decoder: Vec<CellIds>,
    proj: Option<(ParamId, ParamId)>,
}

impl Model {
    /// Glorot-uniform weights, zero biases. Encoder and head draw from the
    /// init stream and the decoder from its own, so adding a decoder leaves
    /// the rest of the initialization unchanged.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut enc_rng = stream_rng(seed, Stream::Init, 0);
        let mut dec_rng = stream_rng(seed, Stream::DecoderInit, 0);
        let mut params = ParamStore::new();
        for (name, shape, dec) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let rng = if dec { &mut dec_rng } else { &mut enc_rng };
                (0..n).map(|_| rng.random_range(-a..=a)).collect()
            } else {
                vec![0.0; n]
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing store, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if params.len() != expected.len() {
            return Err(Error::Shape(format!("{} tensors for a model of {}", params.len(), expected.len())));
        }
        for (name, shape, _) in &expected {
            let id = params.find(name).ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if &params.get(id).shape != shape {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", params.get(id).shape)));
            }
            if params.get(id).data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("weights"));
            }
        }
        let id = |n: String| params.find(&n).expect("checked above");
        let cells = |prefix: &str| {
            (0..config.layers)
                .map(|l| CellIds {
                    theta_r: id(format!("{prefix}.{l}.theta_r")),
                    b_r: id(format!("{prefix}.{l}.b_r")),
                    theta_u: id(format!("{prefix}.{l}.theta_u")),
                    b_u: id(format!("{prefix}.{l}.b_u")),
                    theta_c: id(format!("{prefix}.{l}.theta_c")),
                    b_c: id(format!("{prefix}.{l}.b_c")),
                    input_dim: config.layer_input(l),
                })
                .collect::<Vec<_>>()
        };
        let encoder = cells("enc");
        let head = (config.head_outputs() > 0).then(|| (id("head.w".into()), id("head.b".into())));
        let (decoder, proj) = if config.decoder_horizon().is_some() {
            (cells("dec"), Some((id("proj.w".into()), id("proj.b".into()))))
        } else {
            (Vec::new(), None)
        };
        Ok(Self { config, params, encoder, head, decoder, proj })
    }

    pub fn encoder_ids(&self) -> &[CellIds] {
        &self.encoder
    }

    pub fn decoder_ids(&self) -> &[CellIds] {
        &self.decoder
    }

    pub fn head_ids(&self) -> Option<(ParamId, ParamId)> {
        self.head
    }

    /// Copies every encoder tensor of `source`; the rest is left as is.
    pub fn load_encoder_from(&mut self, source: &Model) -> Result<()> {
        if source.config.conv_kind != self.config.conv_kind
            || source.config.k != self.config.k
            || source.config.input_dim != self.config.input_dim
            || source.encoder.len() != self.encoder.len()
            || source.config.hidden != self.config.hidden
        {
            return Err(Error::Shape(format!(
                "encoder {}×{} (K={}) cannot initialize {}×{} (K={})",
                source.config.layers,
                source.config.hidden,
                source.config.k,
                self.config.layers,
                self.config.hidden,
                self.config.k
            )));
        }
        for (dst, src) in self.encoder.clone().iter().zip(&source.encoder) {
            for (d, s) in [
                (dst.theta_r, src.theta_r),
                (dst.b_r, src.b_r),
                (dst.theta_u, src.theta_u),
                (dst.b_u, src.b_u),
                (dst.theta_c, src.theta_c),
                (dst.b_c, src.b_c),
            ] {
                *self.params.get_mut(d) = source.params.get(s).clone();
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound> {
        let s = self.config.n_terms();
        let h = self.config.hidden;
        let mut cells = |ids: &[CellIds]| -> Result<Vec<CellVars>> {
            ids.iter().map(|c| CellVars::bind(tape, &self.params, c, s, h)).collect()
        };
        let encoder = cells(&self.encoder)?;
        let decoder = cells(&self.decoder)?;
        let mut pair = |p: Option<(ParamId, ParamId)>| -> Result<Option<(Var, Var)>> {
            p.map(|(w, b)| Ok((tape.param(&self.params, w)?, tape.param(&self.params, b)?))).transpose()
        };
        let head = pair(self.head)?;
        let proj = pair(self.proj)?;
        Ok(Bound { encoder, head, decoder, proj })
    }

    /// Head logits `[B, outputs]` for a batch. `ops[b]` is the graph of
    /// clip `b`. Dropout applies only when `dropout` carries a generator.
    pub fn logits(
        &self,
        tape: &mut Tape,
        clips: &[&EegClip],
        ops: &[&GraphOperators],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let bound = self.bind(tape)?;
        let sup = Supports::new(tape, self.config.conv_kind, self.config.k, ops)?;
        let enc = encode(tape, &bound.encoder, &sup, clips, None)?;
        head(tape, &bound, &self.config, *enc.last.last().unwrap(), clips.len(), dropout)
    }

    /// Evaluation-mode logits, row-major `[B, outputs]`.
    pub fn predict(&self, clips: &[&EegClip], ops: &[&GraphOperators]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let v = self.logits(&mut tape, clips, ops, None)?;
        Ok(tape.value(v).data.clone())
    }
}

/// Parameters of one DCGRU cell recorded on a tape, with `Θ` split into the
/// rows acting on the input and on the hidden state.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    /// `[S·D_in, 2H]`, reset and update gates side by side.
    ru_x: Var,
    ru_h: Var,
    c_x: Var,
    c_h: Var,
    b_ru: Var,
    b_c: Var,
    hidden: usize,
}

impl CellVars {
    pub fn bind(tape: &mut Tape, params: &ParamStore, ids: &CellIds, n_terms: usize, hidden: usize) -> Result<Self> {
        let din = ids.input_dim;
        let d = din + hidden;
        let x_rows: Vec<usize> = (0..n_terms).flat_map(|s| (0..din).map(move |j| s * d + j)).collect();
        let h_rows: Vec<usize> = (0..n_terms).flat_map(|s| (0..hidden).map(move |j| s * d + din + j)).collect();
        let mut split = |id: ParamId| -> Result<(Var, Var)> {
            let t = tape.param(params, id)?;
            Ok((tape.gather_rows(t, &x_rows)?, tape.gather_rows(t, &h_rows)?))
        };
        let (rx, rh) = split(ids.theta_r)?;
        let (ux, uh) = split(ids.theta_u)?;
        let (c_x, c_h) = split(ids.theta_c)?;
        let ru_x = tape.concat(&[rx, ux])?;
        let ru_h = tape.concat(&[rh, uh])?;
        let br = tape.param(params, ids.b_r)?;
        let bu = tape.param(params, ids.b_u)?;
        let b_ru = tape.concat(&[br, bu])?;
        let b_c = tape.param(params, ids.b_c)?;
        Ok(Self { ru_x, ru_h, c_x, c_h, b_ru, b_c, hidden })
    }
}

#[derive(Debug, Clone)]
pub struct Bound {
    pub encoder: Vec<CellVars>,
    pub head: Option<(Var, Var)>,
    pub decoder: Vec<CellVars>,
    pub proj: Option<(Var, Var)>,
}

/// Graph operators of a batch registered on a tape.
#[derive(Debug, Clone)]
pub struct Supports {
    kind: ConvKind,
    k: usize,
    mats: Vec<MatsId>,
    pub n_nodes: usize,
    pub batch: usize,
}

impl Supports {
    pub fn new(tape: &mut Tape, kind: ConvKind, k: usize, ops: &[&GraphOperators]) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let n = ops.first().ok_or_else(|| Error::NoData("empty batch".into()))?.n_nodes;
        if ops.iter().any(|o| o.n_nodes != n) {
            return Err(Error::Shape("graphs of different sizes in one batch".into()));
        }
        let stack = |f: &dyn Fn(&GraphOperators) -> Result<&[f64]>| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(ops.len() * n * n);
            for o in ops {
                v.extend_from_slice(f(o)?);
            }
            Ok(v)
        };
        let mut mats = Vec::new();
        match kind {
            ConvKind::Diffusion => {
                mats.push(tape.block_mats(n, stack(&|o| Ok(&o.out_transition))?)?);
                mats.push(tape.block_mats(n, stack(&|o| Ok(&o.in_transition))?)?);
            }
            ConvKind::Chebyshev => mats.push(tape.block_mats(n, stack(&|o| o.scaled_laplacian())?)?),
        }
        Ok(Self { kind, k, mats, n_nodes: n, batch: ops.len() })
    }

    /// The expansion terms of `x` (`[B·N, D]`).
    pub fn expand(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(2 * self.k);
        match self.kind {
            ConvKind::Diffusion => {
                for &m in &self.mats {
                    let mut cur = x;
                    out.push(x);
                    for _ in 1..self.k {
                        cur = tape.block_matmul(m, cur)?;
                        out.push(cur);
                    }
                }
            }
            ConvKind::Chebyshev => {
                let l = self.mats[0];
                out.push(x);
                if self.k > 1 {
                    out.push(tape.block_matmul(l, x)?);
                }
                for s in 2..self.k {
                    let lt = tape.block_matmul(l, out[s - 1])?;
                    let two = tape.scale(lt, 2.0);
                    out.push(tape.sub(two, out[s - 2])?);
                }
            }
        }
        Ok(out)
    }

    fn expand_cat(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let terms = self.expand(tape, x)?;
        tape.concat(&terms)
    }

    /// `Σ_s term_s(x) · Θ_s` with `theta` stored as `[(S·D), H]`.
    pub fn conv(&self, tape: &mut Tape, x: Var, theta: Var) -> Result<Var> {
        let e = self.expand_cat(tape, x)?;
        tape.matmul(e, theta)
    }
}

/// One recurrent update `H_t` from input `x` and state `h`.
pub fn dcgru_step(tape: &mut Tape, cell: &CellVars, sup: &Supports, x: Var, h: Var) -> Result<Var> {
    let hd = cell.hidden;
    let xe = sup.expand_cat(tape, x)?;
    let he = sup.expand_cat(tape, h)?;
    let a = tape.matmul(xe, cell.ru_x)?;
    let b = tape.matmul(he, cell.ru_h)?;
    let ru = tape.add(a, b)?;
    let ru = tape.add_row(ru, cell.b_ru)?;
    let ru = tape.sigmoid(ru);
    let r = tape.slice(ru, 0, hd)?;
    let u = tape.slice(ru, hd, hd)?;
    let rh = tape.mul(r, h)?;
    let rhe = sup.expand_cat(tape, rh)?;
    let a = tape.matmul(xe, cell.c_x)?;
    let b = tape.matmul(rhe, cell.c_h)?;
    let c = tape.add(a, b)?;
    let c = tape.add_row(c, cell.b_c)?;
    let c = tape.tanh(c);
    let keep = tape.mul(u, h)?;
    let neg = tape.scale(u, -1.0);
    let one_minus_u = tape.add_scalar(neg, 1.0);
    let fresh = tape.mul(one_minus_u, c)?;
    tape.add(keep, fresh)
}

#[derive(Debug, Clone)]
pub struct Encoded {
    /// Per layer, state after each clip's last valid step.
    pub last: Vec<Var>,
    /// Per layer, state after the first `snapshot` steps when requested.
    pub snapshot: Option<Vec<Var>>,
}

/// Input frame `t` of every clip as a `[B·N, M]` matrix.
fn frame(clips: &[&EegClip], t: usize) -> Result<Tensor> {
    let (n, m) = (clips[0].n_channels, clips[0].n_features);
    let mut data = Vec::with_capacity(clips.len() * n * m);
    for c in clips {
        data.extend_from_slice(c.step(t));
    }
    Tensor::new(vec![clips.len() * n, m], data)
}

fn check_batch(clips: &[&EegClip], sup: &Supports) -> Result<()> {
    let first = clips.first().ok_or_else(|| Error::NoData("empty batch".into()))?;
    if clips.len() != sup.batch {
        return Err(Error::Shape(format!("{} clips for {} graphs", clips.len(), sup.batch)));
    }
    for c in clips {
        if c.n_steps != first.n_steps || c.n_features != first.n_features || c.n_channels != sup.n_nodes {
            return Err(Error::Shape("clips of a batch must share their dimensions".into()));
        }
        if c.valid_len == 0 {
            return Err(Error::InvalidArgument("clip without valid steps".into()));
        }
    }
    Ok(())
}

/// Runs the stacked recurrence over a batch from a zero state.
pub fn encode(
    tape: &mut Tape,
    cells: &[CellVars],
    sup: &Supports,
    clips: &[&EegClip],
    snapshot: Option<usize>,
) -> Result<Encoded> {
    check_batch(clips, sup)?;
    let n = sup.n_nodes;
    let rows = clips.len() * n;
    let steps = clips[0].n_steps;
    let mut state = Vec::with_capacity(cells.len());
    for c in cells {
        state.push(tape.constant(Tensor::zeros(vec![rows, c.hidden]))?);
    }
    let mut snap = None;
    for t in 0..steps {
        if Some(t) == snapshot {
            snap = Some(state.clone());
        }
        let padded = clips.iter().any(|c| t >= c.valid_len);
        if padded && clips.iter().all(|c| t >= c.valid_len) {
            break;
        }
        let mut input = tape.constant(frame(clips, t)?)?;
        for (l, cell) in cells.iter().enumerate() {
            let mut next = dcgru_step(tape, cell, sup, input, state[l])?;
            if padded {
                let keep: Vec<f64> = clips
                    .iter()
                    .flat_map(|c| core::iter::repeat_n(if t < c.valid_len { 1.0 } else { 0.0 }, n))
                    .collect();
                let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                let fresh = tape.scale_rows(next, keep)?;
                let held = tape.scale_rows(state[l], hold)?;
                next = tape.add(fresh, held)?;
            }
            state[l] = next;
            input = next;
        }
    }
    if snapshot.is_some() && snap.is_none() {
        if snapshot == Some(steps) {
            snap = Some(state.clone());
        } else {
            return Err(Error::InvalidArgument(format!("snapshot {snapshot:?} beyond {steps} steps")));
        }
    }
    Ok(Encoded { last: state, snapshot: snap })
}

/// Per-node fully connected map of the top state, then max over nodes.
pub fn head(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    top: Var,
    batch: usize,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (w, b) = bound.head.ok_or_else(|| Error::InvalidArgument("model has no task head".into()))?;
    let mut x = top;
    let p = config.dropout_head;
    if let Some(rng) = dropout {
        if p > 0.0 {
            let scale = 1.0 / (1.0 - p);
            let mask = (0..tape.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { scale }).collect();
            x = tape.mul_const(x, mask)?;
        }
    }
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    let out = config.head_outputs();
    let rows = tape.value(y).rows();
    let y = tape.reshape(y, vec![batch, rows / batch, out])?;
    let y = tape.max_axis(y, 1)?;
    tape.reshape(y, vec![batch, out])
}

/// Decoder rollout of `horizon` frames from the encoder states `init`.
/// With `teacher`, the input of step `t > 0` is frame `t − 1` of the
/// teacher clips; otherwise it is the previous prediction.
pub fn decode(
    tape: &mut Tape,
    bound: &Bound,
    sup: &Supports,
    init: &[Var],
    horizon: usize,
    teacher: Option<&[&EegClip]>,
) -> Result<Vec<Var>> {
    let (w, b) = bound.proj.ok_or_else(|| Error::InvalidArgument("model has no decoder".into()))?;
    if init.len() != bound.decoder.len() {
        return Err(Error::Shape(format!("{} initial states for {} decoder layers", init.len(), bound.decoder.len())));
    }
    let rows = sup.batch * sup.n_nodes;
    let m = tape.value(w).cols();
    if let Some(tc) = teacher {
        if tc.len() != sup.batch
            || tc.iter().any(|c| c.n_steps + 1 < horizon || c.n_channels != sup.n_nodes || c.n_features != m)
        {
            return Err(Error::Shape("teacher frames do not match the decoder".into()));
        }
    }
    let mut state = init.to_vec();
    let mut input = tape.constant(Tensor::zeros(vec![rows, m]))?;
    let mut out = Vec::with_capacity(horizon);
    for t in 0..horizon {
        if t > 0 {
            input = match teacher {
                Some(tc) => tape.constant(frame(tc, t - 1)?)?,
                None => out[t - 1],
            };
        }
        let mut x = input;
        for (l, cell) in bound.decoder.iter().enumerate() {
            state[l] = dcgru_step(tape, cell, sup, x, state[l])?;
            x = state[l];
        }
        let y = tape.matmul(x, w)?;
        out.push(tape.add_row(y, b)?);
    }
    Ok(out)
}

/// Stacked target frames `[horizon · B · N · M]` and their validity mask.
pub fn target_frames(targets: &[&EegClip], horizon: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut y = Vec::new();
    let mut mask = Vec::new();
    for t in 0..horizon {
        for c in targets {
            if c.n_steps < horizon {
                return Err(Error::Shape(format!("target of {} steps for horizon {horizon}", c.n_steps)));
            }
            y.extend_from_slice(c.step(t));
            let valid = if t < c.valid_len { 1.0 } else { 0.0 };
            mask.extend(core::iter::repeat_n(valid, c.n_channels * c.n_features));
        }
    }
    Ok((y, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{graph_operators, EegGraph};

    fn ring(n: usize, directed: bool) -> GraphOperators {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
            w[i * n + (i + 1) % n] = 0.7;
            if !directed {
                w[((i + 1) % n) * n + i] = 0.7;
            }
        }
        graph_operators(&EegGraph::new(n, w, directed).unwrap()).unwrap()
    }

    fn small(conv: ConvKind, task: Task) -> ModelConfig {
        ModelConfig {
            conv_kind: conv,
            k: 2,
            layers: 2,
            hidden: 3,
            input_dim: 4,
            dropout_head: 0.0,
            task,
            aux_horizon: None,
        }
    }

    fn clip(t: usize, n: usize, m: usize, seed: u64) -> EegClip {
        let mut rng = stream_rng(seed, Stream::Synthesis, 0);
        let f = (0..t * n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        EegClip::new(t, n, m, t, f, None).unwrap()
    }

    #[test]
    fn chebyshev_recurrence_sanity() {
        assert_eq!(chebyshev_t(2, 0.5), -0.5);
        assert_eq!(chebyshev_t(0, 0.3), 1.0);
        assert_eq!(chebyshev_t(1, 0.3), 0.3);
    }

    #[test]
    fn parameter_counts() {
        let dist = ModelConfig::detection(ConvKind::Chebyshev);
        assert_eq!(dist.parameter_count(), 112_577);
        let dist3 = ModelConfig { k: 3, ..dist };
        assert_eq!(dist3.parameter_count(), 168_641);
        assert_eq!(ModelConfig::detection(ConvKind::Diffusion).parameter_count(), 224_705);
    }

    #[test]
    fn diffusion_k1_is_sum_of_identity_terms() {
        let ops = ring(4, true);
        let mut tape = Tape::no_grad();
        let sup = Supports::new(&mut tape, ConvKind::Diffusion, 1, &[&ops]).unwrap();
        let x = tape.constant(Tensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap()).unwrap();
        let theta = tape.constant(Tensor::new(vec![2, 1], vec![0.3, 0.9]).unwrap()).unwrap();
        let y = sup.conv(&mut tape, x, theta).unwrap();
        for (a, b) in tape.value(y).data.iter().zip(&tape.value(x).data) {
            assert_eq!(*a, 0.3 * b + 0.9 * b);
        }
    }

    #[test]
    fn chebyshev_rejects_directed_graph() {
        let ops = ring(4, true);
        let mut tape = Tape::no_grad();
        assert_eq!(Supports::new(&mut tape, ConvKind::Chebyshev, 2, &[&ops]).err(), Some(Error::DirectedGraph));
        assert!(Supports::new(&mut tape, ConvKind::Diffusion, 0, &[&ops]).is_err());
    }

    #[test]
    fn identity_adjacency_diffusion() {
        let ops = graph_operators(&EegGraph::new(3, crate::linalg::identity(3), true).unwrap()).unwrap();
        let mut tape = Tape::no_grad();
        let sup = Supports::new(&mut tape, ConvKind::Diffusion, 3, &[&ops]).unwrap();
        let x = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let theta = tape.constant(Tensor::new(vec![6, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap()).unwrap();
        let y = sup.conv(&mut tape, x, theta).unwrap();
        for (a, b) in tape.value(y).data.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - 2.1 * b).abs() < 1e-12);
        }
    }

    fn saturate_update_gate(model: &mut Model, value: f64) {
        for c in model.encoder.clone() {
            model.params.get_mut(c.b_u).data.iter_mut().for_each(|v| *v = value);
        }
    }

    fn one_step(model: &Model, x: &EegClip, h0: f64) -> (Vec<f64>, Vec<f64>) {
        let ops = ring(x.n_channels, true);
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape).unwrap();
        let sup = Supports::new(&mut tape, model.config.conv_kind, model.config.k, &[&ops]).unwrap();
        let xv = tape.constant(frame(&[x], 0).unwrap()).unwrap();
        let h = tape.constant(Tensor::new(vec![x.n_channels, 3], vec![h0; x.n_channels * 3]).unwrap()).unwrap();
        let out = dcgru_step(&mut tape, &bound.encoder[0], &sup, xv, h).unwrap();
        (tape.value(out).data.clone(), tape.value(h).data.clone())
    }

    #[test]
    fn update_gate_saturation() {
        let x = clip(1, 4, 4, 1);
        let mut model = Model::init(small(ConvKind::Diffusion, Task::Detect), 3).unwrap();
        saturate_update_gate(&mut model, 1e3);
        let (out, h) = one_step(&model, &x, 0.25);
        assert_eq!(out, h);
        saturate_update_gate(&mut model, -1e3);
        // with u = 0 and the hidden-side candidate weights zeroed, H_t = C_t
        // no longer depends on H_prev
        let c0 = model.encoder[0];
        let mut m2 = model.clone();
        let th = m2.params.get_mut(c0.theta_c);
        let (s, din, hd) = (4, 4, 3);
        for t in 0..s {
            for j in 0..hd {
                for c in 0..hd {
                    th.data[(t * (din + hd) + din + j) * hd + c] = 0.0;
                }
            }
        }
        let (a, _) = one_step(&m2, &x, 0.25);
        let (b, _) = one_step(&m2, &x, -0.75);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_weights_zero_clip_zero_state() {
        let cfg = small(ConvKind::Diffusion, Task::Detect);
        let mut model = Model::init(cfg, 0).unwrap();
        for id in model.params.ids().collect::<Vec<_>>() {
            model.params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let ops = ring(4, true);
        let c = EegClip::new(3, 4, 4, 3, vec![0.0; 48], None).unwrap();
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape).unwrap();
        let sup = Supports::new(&mut tape, ConvKind::Diffusion, 2, &[&ops]).unwrap();
        let enc = encode(&mut tape, &bound.encoder, &sup, &[&c], None).unwrap();
        for v in enc.last {
            assert!(tape.value(v).data.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_step_clip_runs_one_cell_per_layer() {
        let model = Model::init(small(ConvKind::Diffusion, Task::Detect), 5).unwrap();
        let c = clip(1, 4, 4, 2);
        let ops = ring(4, true);
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape).unwrap();
        let sup = Supports::new(&mut tape, ConvKind::Diffusion, 2, &[&ops]).unwrap();
        let enc = encode(&mut tape, &bound.encoder, &sup, &[&c], None).unwrap();
        let x = tape.constant(frame(&[&c], 0).unwrap()).unwrap();
        let h0 = tape.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let h1 = dcgru_step(&mut tape, &bound.encoder[0], &sup, x, h0).unwrap();
        let h0b = tape.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let h2 = dcgru_step(&mut tape, &bound.encoder[1], &sup, h1, h0b).unwrap();
        assert_eq!(tape.value(enc.last[1]).data, tape.value(h2).data);
    }

    #[test]
    fn padded_steps_keep_the_state() {
        let model = Model::init(small(ConvKind::Diffusion, Task::Detect), 5).unwrap();
        let full = clip(4, 4, 4, 9);
        let mut short = full.clone();
        short.valid_len = 2;
        short.features[32..].iter_mut().for_each(|v| *v = 1.5);
        let two = EegClip::new(2, 4, 4, 2, full.features[..32].to_vec(), None).unwrap();
        let ops = ring(4, true);
        let a = model.predict(&[&short, &full], &[&ops, &ops]).unwrap();
        let b = model.predict(&[&two], &[&ops]).unwrap();
        let c = model.predict(&[&full], &[&ops]).unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], c[0]);
    }

    #[test]
    fn head_takes_node_maximum() {
        let cfg = ModelConfig { layers: 1, ..small(ConvKind::Diffusion, Task::Detect) };
        let model = Model::init(cfg.clone(), 1).unwrap();
        let mut tape = Tape::no_grad();
        let bound = model.bind(&mut tape).unwrap();
        let (w, _) = bound.head.unwrap();
        let wv = tape.value(w).data.clone();
        // equal node states give the common node logit
        let top = tape.constant(Tensor::new(vec![4, 3], [0.2, -0.1, 0.4].repeat(4)).unwrap()).unwrap();
        let y = head(&mut tape, &bound, &cfg, top, 1, None).unwrap();
        let node = 0.2 * wv[0] - 0.1 * wv[1] + 0.4 * wv[2];
        assert!((tape.value(y).item() - node).abs() < 1e-15);
        // a planted large activation wins the max
        let big = if wv[0] >= 0.0 { 50.0 } else { -50.0 };
        let mut d = vec![0.0; 12];
        d[2 * 3] = big;
        let top = tape.constant(Tensor::new(vec![4, 3], d).unwrap()).unwrap();
        let y = head(&mut tape, &bound, &cfg, top, 1, None).unwrap();
        assert_eq!(tape.value(y).item(), big * wv[0]);
    }

    #[test]
    fn classifier_emits_one_logit_per_class() {
        let n = crate::preprocess::LabelRemap::four_class().n_classes();
        assert_eq!(n, 4);
        let model = Model::init(small(ConvKind::Diffusion, Task::Classify { n_classes: n }), 0).unwrap();
        let ops = ring(4, true);
        let c = clip(2, 4, 4, 0);
        assert_eq!(model.predict(&[&c, &c], &[&ops, &ops]).unwrap().len(), 8);
    }

    #[test]
    fn decoder_rollout() {
        let model = Model::init(small(ConvKind::Diffusion, Task::Pretrain { horizon: 1 }), 2).unwrap();
        let ops = ring(4, true);
        let c = clip(3, 4, 4, 4);
        let zeros = EegClip::new(1, 4, 4, 1, vec![0.0; 16], None).unwrap();
        let run = |teacher: bool| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let sup = Supports::new(&mut tape, ConvKind::Diffusion, 2, &[&ops]).unwrap();
            let enc = encode(&mut tape, &bound.encoder, &sup, &[&c], None).unwrap();
            let t = [&zeros];
            let preds = decode(&mut tape, &bound, &sup, &enc.last, 1, teacher.then_some(&t[..])).unwrap();
            assert_eq!(preds.len(), 1);
            let p = tape.value(preds[0]).data.clone();
            let (y, mask) = target_frames(&[&zeros], 1).unwrap();
            let l = tape.masked_l1(preds[0], &y, &mask).unwrap();
            let mean_abs = p.iter().map(|v| v.abs()).sum::<f64>() / p.len() as f64;
            assert!((tape.value(l).item() - mean_abs).abs() < 1e-15);
            p
        };
        assert_eq!(run(true), run(false));
        assert_eq!(run(false), run(false));
    }

    #[test]
    fn encoder_transfer_and_shape_checks() {
        let pre = Model::init(small(ConvKind::Diffusion, Task::Pretrain { horizon: 2 }), 11).unwrap();
        let mut det = Model::init(small(ConvKind::Diffusion, Task::Detect), 12).unwrap();
        let head_before = det.params.get(det.head.unwrap().0).clone();
        det.load_encoder_from(&pre).unwrap();
        for (d, s) in det.encoder.iter().zip(&pre.encoder) {
            assert_eq!(det.params.get(d.theta_c), pre.params.get(s.theta_c));
        }
        assert_eq!(det.params.get(det.head.unwrap().0), &head_before);
        let wide = Model::init(ModelConfig { hidden: 5, ..small(ConvKind::Diffusion, Task::Detect) }, 0).unwrap();
        assert!(det.load_encoder_from(&wide).is_err());
        let mut p = det.params.clone();
        let id = p.find("head.w").unwrap();
        *p.get_mut(id) = Tensor::zeros(vec![2, 1]);
        assert!(Model::from_params(det.config.clone(), p).is_err());
    }

    #[test]
    fn init_is_seeded_and_decoder_independent() {
        let a = Model::init(small(ConvKind::Chebyshev, Task::Detect), 4).unwrap();
        let b = Model::init(small(ConvKind::Chebyshev, Task::Detect), 4).unwrap();
        assert_eq!(a, b);
        let aux =
            Model::init(ModelConfig { aux_horizon: Some(2), ..small(ConvKind::Chebyshev, Task::Detect) }, 4).unwrap();
        for (id, name, t) in a.params.iter() {
            assert_eq!(aux.params.get(aux.params.find(name).unwrap()), t, "{name} {id:?}");
        }
        assert!(a.params.get(a.encoder[0].b_r).data.iter().all(|&v| v == 0.0));
    }
}
