//! Dense row-major tensors with an eager reverse-mode tape.
//!
//! Every op evaluates immediately and, when the tape records gradients,
//! remembers its inputs. [`Tape::backward`] walks the record in reverse
//! execution order and returns the gradient of a scalar loss with respect
//! to every parameter that took part in the forward pass. A tensor used `k`
//! times receives the sum of its `k` contributions.
//!
//! Shapes are deliberately simple: most ops treat a tensor as a matrix of
//! `rows × cols` where `cols` is the last dimension.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

use crate::{Error, Result};

/// A dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Rounds every value to the nearest `f32`, so that a 32-bit export
    /// reloads bit-exactly.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a set of constant per-block square matrices on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatsId(usize);

#[derive(Debug)]
struct BlockMats {
    n: usize,
    blocks: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MaxAxis { src: Var, len: usize, inner: usize, argmax: Vec<usize> },
    Softmax(Var),
    ScaleRows(Var, Vec<f64>),
    MulConst(Var, Vec<f64>),
    BlockMatMul(MatsId, Var),
    BceWithLogits(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
    MaskedL1 { pred: Var, target: Vec<f64>, mask: Vec<f64>, count: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients of a loss with respect to the parameters of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// Number of parameter slots (present or not).
    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Eager computation record.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mats: Vec<BlockMats>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl Tape {
    /// A tape that records for differentiation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), mats: Vec::new(), grad_enabled: true }
    }

    /// A tape that only evaluates.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, param: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tape input"));
        }
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Records a parameter of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id).clone();
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter"));
        }
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    /// Registers `blocks.len() / (n·n)` constant `n × n` matrices.
    pub fn block_mats(&mut self, n: usize, blocks: Vec<f64>) -> Result<MatsId> {
        if n == 0 || blocks.len() % (n * n) != 0 {
            return shape_err(format!("{} values do not form {n}×{n} blocks", blocks.len()));
        }
        self.mats.push(BlockMats { n, blocks });
        Ok(MatsId(self.mats.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return shape_err(format!("matmul {:?} × {:?}", ta.shape, tb.shape));
        }
        let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; r * c];
        gemm_acc(&ta.data, &tb.data, &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![r, c], data: out }, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return shape_err(format!("{name} {:?} vs {:?}", ta.shape, tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `a + b` with `b` (length `cols`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.len() != c {
            return shape_err(format!("row broadcast of {:?} onto {:?}", tb.shape, ta.shape));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| f(x)).collect() };
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("log of a non-positive value".into()));
        }
        Ok(self.map(a, f64::ln, Op::Log(a)))
    }

    /// Concatenation along the last axis; all inputs share their rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let lead: Vec<usize> = {
            let s = &self.value(*first).shape;
            s[..s.len() - 1].to_vec()
        };
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows || t.shape[..t.shape.len() - 1] != lead[..] {
                return shape_err(format!("concat {:?} with {:?}", self.value(*first).shape, t.shape));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(cols);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if start + len > c {
            return shape_err(format!("slice [{start}, {}) of {c} columns", start + len));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for row in t.data.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice(a, start), rg))
    }

    /// Selects rows (of the `rows × cols` view) by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return shape_err(format!("row {i} of {r}"));
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: vec![idx.len(), c], data }, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return shape_err(format!("reshape {:?} to {shape:?}", t.shape));
        }
        let t = Tensor { shape, data: t.data.clone() };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Maximum over `axis`; gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.shape.len() {
            return shape_err(format!("axis {axis} of {:?}", t.shape));
        }
        let len = t.shape[axis];
        let inner: usize = t.shape[axis + 1..].iter().product();
        let outer: usize = t.shape[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..len {
                    let v = t.data[(o * len + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data }, Op::MaxAxis { src: a, len, inner, argmax }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.rows() {
            return shape_err(format!("{} row factors for {} rows", factors.len(), t.rows()));
        }
        let c = t.cols();
        let mut data = t.data.clone();
        for (row, f) in data.chunks_mut(c).zip(&factors) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let t = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(t, Op::ScaleRows(a, factors), rg))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if c.len() != t.len() {
            return shape_err(format!("constant of {} for tensor of {}", c.len(), t.len()));
        }
        let data = t.data.iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: t.shape.clone(), data };
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    /// Applies block `b` of `mats` to rows `[b·n, (b+1)·n)` of `x`.
    pub fn block_matmul(&mut self, mats: MatsId, x: Var) -> Result<Var> {
        let m = &self.mats[mats.0];
        let n = m.n;
        let t = &self.nodes[x.0].value;
        let (r, c) = (t.rows(), t.cols());
        let n_blocks = m.blocks.len() / (n * n);
        if r != n_blocks * n {
            return shape_err(format!("{r} rows for {n_blocks} blocks of {n} nodes"));
        }
        let mut out = vec![0.0; r * c];
        for b in 0..n_blocks {
            gemm_acc(
                &m.blocks[b * n * n..(b + 1) * n * n],
                &t.data[b * n * c..(b + 1) * n * c],
                &mut out[b * n * c..(b + 1) * n * c],
                n,
                n,
                c,
            );
        }
        let t = Tensor { shape: t.shape.clone(), data: out };
        let rg = self.rg(x);
        Ok(self.push(t, Op::BlockMatMul(mats, x), rg))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() || t.is_empty() {
            return shape_err(format!("{} logits for {} targets", t.len(), targets.len()));
        }
        let loss = t.data.iter().zip(targets).map(|(&z, &y)| bce_with_logits(z, y)).sum::<f64>() / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.to_vec()), rg))
    }

    /// Mean multi-class cross-entropy of `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != targets.len() || targets.is_empty() {
            return shape_err(format!("{} logit rows for {} targets", t.rows(), targets.len()));
        }
        let mut loss = 0.0;
        for (row, &y) in t.data.chunks(c).zip(targets) {
            if y >= c {
                return Err(Error::ClassOutOfRange { index: y, n_classes: c });
            }
            loss += cross_entropy(row, y);
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    /// Mean absolute error over the entries where `mask` is nonzero.
    pub fn masked_l1(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.len() != target.len() || t.len() != mask.len() {
            return shape_err(format!("l1 of {} predictions, {} targets, {} mask", t.len(), target.len(), mask.len()));
        }
        let count: f64 = mask.iter().sum();
        if !(count > 0.0) {
            return Err(Error::NoData("every target entry is masked".into()));
        }
        let loss = t.data.iter().zip(target).zip(mask).map(|((p, y), m)| m * (p - y).abs()).sum::<f64>() / count;
        let rg = self.rg(pred);
        let op = Op::MaskedL1 { pred, target: target.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse pass from the scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var, n_params: usize) -> Result<Gradients> {
        let Tape { nodes, mats, .. } = self;
        if !nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        if nodes[loss.0].value.len() != 1 {
            return shape_err(format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut by_param: Vec<Option<Tensor>> = vec![None; n_params];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, contrib: Vec<f64>| accumulate(&mut grads[v.0], contrib);
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        if id.0 >= n_params {
                            return shape_err(format!("parameter {} beyond {n_params} slots", id.0));
                        }
                        let slot = &mut by_param[id.0];
                        match slot {
                            Some(t) => t.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(Tensor { shape: node.value.shape.clone(), data: g }),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (r, k, c) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if wants(*a) {
                        let bt = transpose(&tb.data, k, c);
                        let mut da = vec![0.0; r * k];
                        gemm_acc(&g, &bt, &mut da, r, c, k);
                        acc(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * c];
                        for row in 0..r {
                            let grow = &g[row * c..(row + 1) * c];
                            for p in 0..k {
                                let x = ta.data[row * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, g.clone());
                    }
                    if wants(*b) {
                        acc(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        acc(*a, g.clone());
                    }
                    if wants(*b) {
                        acc(*b, g.iter().map(|x| -x).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect());
                    }
                    if wants(*b) {
                        acc(*b, g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect());
                    }
                }
                Op::AddRow(a, b) => {
                    if wants(*b) {
                        let c = val(*b).len();
                        let mut db = vec![0.0; c];
                        for row in g.chunks(c) {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        acc(*b, db);
                    }
                    if wants(*a) {
                        acc(*a, g);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g),
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    acc(*a, g.iter().zip(y).map(|(gv, y)| gv * y * (1.0 - y)).collect());
                }
                Op::Tanh(a) => {
                    let y = &node.value.data;
                    acc(*a, g.iter().zip(y).map(|(gv, y)| gv * (1.0 - y * y)).collect());
                }
                Op::Log(a) => acc(*a, g.iter().zip(&val(*a).data).map(|(gv, x)| gv / x).collect()),
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        if wants(p) {
                            let mut dp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                dp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                            }
                            acc(p, dp);
                        }
                        off += c;
                    }
                }
                Op::Slice(a, start) => {
                    let c = val(*a).cols();
                    let len = node.value.cols();
                    let mut da = vec![0.0; val(*a).len()];
                    for (r, grow) in g.chunks(len).enumerate() {
                        da[r * c + start..r * c + start + len].copy_from_slice(grow);
                    }
                    acc(*a, da);
                }
                Op::GatherRows(a, idx) => {
                    let c = val(*a).cols();
                    let mut da = vec![0.0; val(*a).len()];
                    for (k, &r) in idx.iter().enumerate() {
                        for (d, x) in da[r * c..(r + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                            *d += x;
                        }
                    }
                    acc(*a, da);
                }
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    acc(*a, vec![g[0] / n as f64; n]);
                }
                Op::MaxAxis { src, len, inner, argmax } => {
                    let mut da = vec![0.0; val(*src).len()];
                    for (k, (&best, gv)) in argmax.iter().zip(&g).enumerate() {
                        let (o, i) = (k / inner, k % inner);
                        da[(o * len + best) * inner + i] += gv;
                    }
                    acc(*src, da);
                }
                Op::Softmax(a) => {
                    let y = &node.value.data;
                    let c = node.value.cols();
                    let mut da = vec![0.0; y.len()];
                    for ((d, yr), gr) in da.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in d.iter_mut().zip(yr).zip(gr) {
                            *dv = yv * (gv - dot);
                        }
                    }
                    acc(*a, da);
                }
                Op::ScaleRows(a, f) => {
                    let c = node.value.cols();
                    let mut da = g;
                    for (row, s) in da.chunks_mut(c).zip(f) {
                        row.iter_mut().for_each(|x| *x *= s);
                    }
                    acc(*a, da);
                }
                Op::MulConst(a, cst) => acc(*a, g.iter().zip(cst).map(|(x, y)| x * y).collect()),
                Op::BlockMatMul(id, x) => {
                    let m = &mats[id.0];
                    let n = m.n;
                    let c = node.value.cols();
                    let n_blocks = m.blocks.len() / (n * n);
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n_blocks {
                        let mt = transpose(&m.blocks[b * n * n..(b + 1) * n * n], n, n);
                        gemm_acc(&mt, &g[b * n * c..(b + 1) * n * c], &mut dx[b * n * c..(b + 1) * n * c], n, n, c);
                    }
                    acc(*x, dx);
                }
                Op::BceWithLogits(a, y) => {
                    let z = &val(*a).data;
                    let s = g[0] / y.len() as f64;
                    acc(*a, z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) * s).collect());
                }
                Op::CrossEntropy(a, y) => {
                    let t = val(*a);
                    let c = t.cols();
                    let s = g[0] / y.len() as f64;
                    let mut da = Vec::with_capacity(t.len());
                    for (row, &target) in t.data.chunks(c).zip(y) {
                        let p = softmax_row(row);
                        da.extend(p.iter().enumerate().map(|(k, pk)| (pk - if k == target { 1.0 } else { 0.0 }) * s));
                    }
                    acc(*a, da);
                }
                Op::MaskedL1 { pred, target, mask, count } => {
                    let p = &val(*pred).data;
                    let s = g[0] / count;
                    let d = p
                        .iter()
                        .zip(target)
                        .zip(mask)
                        .map(|((p, y), m)| {
                            let diff = p - y;
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            sign * m * s
                        })
                        .collect();
                    acc(*pred, d);
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        None => *slot = Some(contrib),
    }
}

/// `out += a (r×k) · b (k×c)`, row-major.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * c..(p + 1) * c]) {
                *o += x * bv;
            }
        }
    }
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(z, 0) − z·y + ln(1 + e^{−|z|})`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `−log softmax(row)[target]` via log-sum-exp.
pub fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - row[target]
}
