//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its parents. Parents always precede children, so one reverse sweep over
//! the node list visits each node exactly once after all of its consumers.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{arg, Error, Result};
use crate::sparse::Pattern;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Precomputed index plan for normalizing a sparse structure inside a GCN
/// layer: `D^{-1/2} (V [+ I]) D^{-1/2}` with `D` the row degree of `V [+ I]`.
#[derive(Debug, Clone)]
pub struct GcnPlan {
    input: Arc<Pattern>,
    output: Arc<Pattern>,
    input_to_output: Arc<Vec<usize>>,
    diag: Option<Arc<Vec<usize>>>,
}

impl GcnPlan {
    pub fn new(input: Arc<Pattern>, self_loops: bool) -> Result<Self> {
        if input.n_rows() != input.n_cols() {
            return arg(format!("gcn structure must be square, got {}x{}", input.n_rows(), input.n_cols()));
        }
        if self_loops {
            let n = input.n_rows();
            let (output, map, diag) = input.union(&Pattern::identity(n))?;
            Ok(Self { input, output: Arc::new(output), input_to_output: Arc::new(map), diag: Some(Arc::new(diag)) })
        } else {
            let map = (0..input.nnz()).collect();
            Ok(Self { output: input.clone(), input, input_to_output: Arc::new(map), diag: None })
        }
    }

    pub fn input(&self) -> &Arc<Pattern> {
        &self.input
    }

    pub fn output(&self) -> &Arc<Pattern> {
        &self.output
    }

    pub fn self_loops(&self) -> bool {
        self.diag.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Prelu(Var, Var),
    RowSoftmax(Var),
    Sum(Var),
    Mask(Var, Arc<Vec<f64>>),
    BroadcastEntry { src: Var, col: usize },
    GcnNorm { values: Var, plan: GcnPlan, inv_sqrt_deg: Vec<f64>, clamped: Vec<bool> },
    SpMM { pattern: Arc<Pattern>, values: Var, dense: Var },
    PairScores { pattern: Arc<Pattern>, z: Var, w: Var, b: Var },
    SegmentSoftmax { pattern: Arc<Pattern>, values: Var },
    Scatter { values: Var, map: Arc<Vec<usize>> },
    RowScale { values: Var, rows: Arc<Vec<usize>>, weights: Var },
    Gather { dense: Var, pattern: Arc<Pattern> },
    Densify { values: Var, pattern: Arc<Pattern> },
    Confidence { o: Var, epsilon: f64, lambda: f64, top: Vec<(usize, usize, bool)> },
    CrossEntropy { o: Var, targets: Arc<Vec<(usize, usize)>> },
    InfoNce { a: Var, b: Var, batch: Arc<Vec<usize>>, tau: f64, saved: Box<InfoNceSaved> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities below this are floored before taking logarithms.
/// Names of every recordable operation, as reported by [`Tape::op_names`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "relu",
    "elu",
    "tanh",
    "sigmoid",
    "identity",
    "prelu",
    "row_softmax",
    "sum",
    "mask",
    "broadcast_entry",
    "gcn_norm",
    "spmm",
    "pair_scores",
    "segment_softmax",
    "scatter",
    "row_scale",
    "gather",
    "densify",
    "confidence",
    "cross_entropy",
    "infonce",
];

impl Op {
    fn name(&self) -> Option<&'static str> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Elu) => "elu",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Act(_, Activation::Identity) => "identity",
            Op::Prelu(..) => "prelu",
            Op::RowSoftmax(..) => "row_softmax",
            Op::Sum(..) => "sum",
            Op::Mask(..) => "mask",
            Op::BroadcastEntry { .. } => "broadcast_entry",
            Op::GcnNorm { .. } => "gcn_norm",
            Op::SpMM { .. } => "spmm",
            Op::PairScores { .. } => "pair_scores",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Scatter { .. } => "scatter",
            Op::RowScale { .. } => "row_scale",
            Op::Gather { .. } => "gather",
            Op::Densify { .. } => "densify",
            Op::Confidence { .. } => "confidence",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::InfoNce { .. } => "infonce",
        })
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears gradients so `backward` may run again on the same recording.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Distinct operation names recorded so far.
    pub fn op_names(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes.iter().filter_map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1 x c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let out = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Act(a, act), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Elu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// PReLU with one learnable scalar slope (`1 x 1`).
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::Shape("prelu slope must be 1x1".into()));
        }
        let s = self.value(slope).item();
        let out = self.value(a).map(|x| if x > 0.0 { x } else { s * x });
        let rg = self.rg(&[a, slope]);
        Ok(self.push(out, Op::Prelu(a, slope), rg))
    }

    /// Numerically stable softmax over each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::RowSoftmax(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Elementwise product with a fixed mask (dropout with a pre-scaled mask).
    pub fn mask(&mut self, a: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape(format!("mask of {} for {:?}", mask.len(), self.value(a).shape())));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    /// Column `n x 1` filled with entry `(0, col)` of `src`.
    pub fn broadcast_entry(&mut self, src: Var, col: usize, n: usize) -> Result<Var> {
        let vs = self.value(src);
        if vs.rows() != 1 || col >= vs.cols() {
            return Err(Error::Shape(format!("broadcast_entry col {col} of {:?}", vs.shape())));
        }
        let out = Tensor::full(n, 1, vs.get(0, col));
        let rg = self.rg(&[src]);
        Ok(self.push(out, Op::BroadcastEntry { src, col }, rg))
    }

    /// Normalized GCN propagation weights on `plan.output()`.
    pub fn gcn_norm(&mut self, plan: &GcnPlan, values: Var) -> Result<Var> {
        let v = self.value(values);
        if v.cols() != 1 || v.rows() != plan.input.nnz() {
            return Err(Error::Shape(format!("gcn_norm values {:?} for pattern with {} entries", v.shape(), plan.input.nnz())));
        }
        let n = plan.input.n_rows();
        let out_pat = &plan.output;
        let mut u = vec![0.0; out_pat.nnz()];
        for (k, &slot) in plan.input_to_output.iter().enumerate() {
            u[slot] += v.data()[k];
        }
        if let Some(diag) = &plan.diag {
            for &slot in diag.iter() {
                u[slot] += 1.0;
            }
        }
        let mut inv_sqrt_deg = vec![1.0; n];
        let mut clamped = vec![false; n];
        for i in 0..n {
            let d: f64 = u[out_pat.row_range(i)].iter().sum();
            if d > 0.0 {
                inv_sqrt_deg[i] = d.powf(-0.5);
            } else {
                clamped[i] = true;
            }
        }
        for i in 0..n {
            for e in out_pat.row_range(i) {
                u[e] *= inv_sqrt_deg[i] * inv_sqrt_deg[out_pat.col_idx()[e]];
            }
        }
        let rg = self.rg(&[values]);
        let op = Op::GcnNorm { values, plan: plan.clone(), inv_sqrt_deg, clamped };
        Ok(self.push(Tensor::column(u), op, rg))
    }

    /// Sparse (values on `pattern`) times dense.
    pub fn spmm(&mut self, pattern: &Arc<Pattern>, values: Var, dense: Var) -> Result<Var> {
        let (v, h) = (self.value(values), self.value(dense));
        if v.rows() != pattern.nnz() || v.cols() != 1 || h.rows() != pattern.n_cols() {
            return Err(Error::Shape(format!(
                "spmm pattern {}x{} ({} nnz), values {:?}, dense {:?}",
                pattern.n_rows(),
                pattern.n_cols(),
                pattern.nnz(),
                v.shape(),
                h.shape()
            )));
        }
        let m = h.cols();
        let mut out = Tensor::zeros(pattern.n_rows(), m);
        for i in 0..pattern.n_rows() {
            let o = out.row_mut(i);
            for e in pattern.row_range(i) {
                let a = v.data()[e];
                if a == 0.0 {
                    continue;
                }
                for (x, y) in o.iter_mut().zip(h.row(pattern.col_idx()[e])) {
                    *x += a * y;
                }
            }
        }
        let rg = self.rg(&[values, dense]);
        Ok(self.push(out, Op::SpMM { pattern: pattern.clone(), values, dense }, rg))
    }

    /// One GCN layer: `norm(V) * H * W`.
    pub fn gcn_layer(&mut self, plan: &GcnPlan, view_values: Var, h: Var, w: Var) -> Result<Var> {
        let hw = self.matmul(h, w)?;
        let norm = self.gcn_norm(plan, view_values)?;
        self.spmm(plan.output(), norm, hw)
    }

    /// For each stored `(i, j)`: `w[..d] . z_i + w[d..] . z_j + b`.
    pub fn pair_scores(&mut self, pattern: &Arc<Pattern>, z: Var, w: Var, b: Var) -> Result<Var> {
        let (vz, vw, vb) = (self.value(z), self.value(w), self.value(b));
        let d = vz.cols();
        if vw.rows() != 2 * d || vw.cols() != 1 || vb.len() != 1 || vz.rows() != pattern.n_rows() {
            return Err(Error::Shape(format!("pair_scores z {:?}, w {:?}, b {:?}", vz.shape(), vw.shape(), vb.shape())));
        }
        let (sa, sb) = pair_halves(vz, vw.data());
        let bias = vb.item();
        let mut out = Vec::with_capacity(pattern.nnz());
        for (i, j) in pattern.coords() {
            out.push(sa[i] + sb[j] + bias);
        }
        let rg = self.rg(&[z, w, b]);
        Ok(self.push(Tensor::column(out), Op::PairScores { pattern: pattern.clone(), z, w, b }, rg))
    }

    /// Softmax over the stored entries of each row. Every row must be non-empty.
    pub fn segment_softmax(&mut self, pattern: &Arc<Pattern>, values: Var) -> Result<Var> {
        let v = self.value(values);
        if v.rows() != pattern.nnz() || v.cols() != 1 {
            return Err(Error::Shape(format!("segment_softmax values {:?}", v.shape())));
        }
        if let Some(i) = (0..pattern.n_rows()).find(|&i| pattern.row(i).is_empty()) {
            return arg(format!("segment softmax: row {i} has an empty scope"));
        }
        let mut out = v.clone();
        for i in 0..pattern.n_rows() {
            softmax_in_place(&mut out.data_mut()[pattern.row_range(i)]);
        }
        let rg = self.rg(&[values]);
        Ok(self.push(out, Op::SegmentSoftmax { pattern: pattern.clone(), values }, rg))
    }

    /// Places `values[k]` at slot `map[k]` of a zero column of length `len`.
    pub fn scatter(&mut self, values: Var, map: Arc<Vec<usize>>, len: usize) -> Result<Var> {
        let v = self.value(values);
        if v.rows() != map.len() || v.cols() != 1 || map.iter().any(|&s| s >= len) {
            return Err(Error::Shape(format!("scatter {:?} into {len} slots", v.shape())));
        }
        let mut out = vec![0.0; len];
        for (k, &s) in map.iter().enumerate() {
            out[s] += v.data()[k];
        }
        let rg = self.rg(&[values]);
        Ok(self.push(Tensor::column(out), Op::Scatter { values, map }, rg))
    }

    /// Multiplies each stored entry by the weight of its row.
    pub fn row_scale(&mut self, values: Var, rows: Arc<Vec<usize>>, weights: Var) -> Result<Var> {
        let (v, w) = (self.value(values), self.value(weights));
        if v.rows() != rows.len() || v.cols() != 1 || w.cols() != 1 || rows.iter().any(|&r| r >= w.rows()) {
            return Err(Error::Shape(format!("row_scale values {:?} weights {:?}", v.shape(), w.shape())));
        }
        let out = v.data().iter().zip(rows.iter()).map(|(x, &r)| x * w.data()[r]).collect();
        let rg = self.rg(&[values, weights]);
        Ok(self.push(Tensor::column(out), Op::RowScale { values, rows, weights }, rg))
    }

    /// Reads the entries of a dense matrix at the stored positions of `pattern`.
    pub fn gather(&mut self, dense: Var, pattern: &Arc<Pattern>) -> Result<Var> {
        let d = self.value(dense);
        if d.shape() != (pattern.n_rows(), pattern.n_cols()) {
            return Err(Error::Shape(format!("gather {:?} with pattern {}x{}", d.shape(), pattern.n_rows(), pattern.n_cols())));
        }
        let out = pattern.coords().map(|(i, j)| d.get(i, j)).collect();
        let rg = self.rg(&[dense]);
        Ok(self.push(Tensor::column(out), Op::Gather { dense, pattern: pattern.clone() }, rg))
    }

    /// Dense matrix with stored values at `pattern` positions and zeros elsewhere.
    pub fn densify(&mut self, values: Var, pattern: &Arc<Pattern>) -> Result<Var> {
        let v = self.value(values);
        if v.rows() != pattern.nnz() || v.cols() != 1 {
            return Err(Error::Shape(format!("densify values {:?}", v.shape())));
        }
        let mut out = Tensor::zeros(pattern.n_rows(), pattern.n_cols());
        for (k, (i, j)) in pattern.coords().enumerate() {
            out.set(i, j, v.data()[k]);
        }
        let rg = self.rg(&[values]);
        Ok(self.push(out, Op::Densify { values, pattern: pattern.clone() }, rg))
    }

    /// Dense softmax restricted to each row's scope; off-scope entries are exactly 0.
    pub fn masked_row_softmax(&mut self, x: Var, scope: &Arc<Pattern>) -> Result<Var> {
        let g = self.gather(x, scope)?;
        let s = self.segment_softmax(scope, g)?;
        self.densify(s, scope)
    }

    /// Per-row prediction confidence
    /// `exp(eps * (lambda ln o_max + (1 - lambda) ln max(o_max - o_second, delta)))`.
    pub fn confidence(&mut self, o: Var, epsilon: f64, lambda: f64, delta: f64) -> Result<Var> {
        let v = self.value(o);
        if v.cols() < 2 {
            return arg(format!("confidence needs at least 2 classes, got {}", v.cols()));
        }
        let mut top = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let (m, sm) = top_two(v.row(r));
            let (om, osm) = (v.get(r, m), v.get(r, sm));
            let margin = om - osm;
            let active = margin > delta;
            let log_margin = if active { margin.ln() } else { delta.ln() };
            let pi = (epsilon * (lambda * om.max(PROB_FLOOR).ln() + (1.0 - lambda) * log_margin)).exp();
            top.push((m, sm, active));
            out.push(pi);
        }
        let rg = self.rg(&[o]);
        Ok(self.push(Tensor::column(out), Op::Confidence { o, epsilon, lambda, top }, rg))
    }

    /// Sum over `targets` of `-ln o[i, y]`, probabilities floored at [`PROB_FLOOR`].
    pub fn cross_entropy(&mut self, o: Var, targets: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        if targets.is_empty() {
            return arg("cross entropy over an empty index set");
        }
        let v = self.value(o);
        let mut loss = 0.0;
        for &(i, y) in targets.iter() {
            if i >= v.rows() || y >= v.cols() {
                return Err(Error::Shape(format!("target ({i}, {y}) outside {:?}", v.shape())));
            }
            loss -= v.get(i, y).max(PROB_FLOOR).ln();
        }
        let rg = self.rg(&[o]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { o, targets }, rg))
    }

    /// Symmetric cross-view InfoNCE over the batch rows of `a` and `b`.
    pub fn infonce(&mut self, a: Var, b: Var, batch: Arc<Vec<usize>>, tau: f64) -> Result<Var> {
        self.same_shape(a, b, "infonce")?;
        if batch.is_empty() {
            return arg("infonce batch is empty");
        }
        if tau <= 0.0 {
            return arg(format!("temperature must be positive, got {tau}"));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.value(a).rows()) {
            return arg(format!("batch index {i} out of range"));
        }
        if batch.len() == 1 {
            log::warn!("infonce batch of size 1 has no negatives; loss is 0");
        }
        let f = infonce_forward(self.value(a), self.value(b), &batch, tau);
        let rg = self.rg(&[a, b]);
        let saved = Box::new(InfoNceSaved { ua: f.ua, ub: f.ub, na: f.na, nb: f.nb, p: f.p });
        Ok(self.push(Tensor::scalar(f.loss), Op::InfoNce { a, b, batch, tau, saved }, rg))
    }

    /// Accumulates gradients of the scalar `loss` into every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return arg(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let out = &nodes[id].value;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t(val(*b))?);
                }
                if wants(*b) {
                    acc(*b, val(*a).t_matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip(g, vb, |g, y| g * y));
                acc(*b, zip(g, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip(g, vb, |g, y| g / y));
                let ga = zip(g, va, |g, x| g * x);
                acc(*b, zip(&ga, vb, |gx, y| -gx / (y * y)));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                if wants(*bias) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, y) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*bias, gb);
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::Act(a, act) => {
                let va = val(*a);
                let data = g.data().iter().zip(va.data()).zip(out.data()).map(|((g, &x), &y)| g * act.derivative(x, y)).collect();
                acc(*a, Tensor::new(g.rows(), g.cols(), data)?);
            }
            Op::Prelu(a, slope) => {
                let va = val(*a);
                let s = val(*slope).item();
                acc(*a, zip(g, va, |g, x| if x > 0.0 { g } else { g * s }));
                if wants(*slope) {
                    let gs: f64 = g.data().iter().zip(va.data()).filter(|(_, &x)| x <= 0.0).map(|(g, x)| g * x).sum();
                    acc(*slope, Tensor::scalar(gs));
                }
            }
            Op::RowSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..g.rows() {
                    softmax_backward(out.row(r), g.row(r), ga.row_mut(r));
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mask(a, mask) => {
                let data = g.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                acc(*a, Tensor::new(g.rows(), g.cols(), data)?);
            }
            Op::BroadcastEntry { src, col } => {
                let mut gs = Tensor::zeros(1, val(*src).cols());
                gs.set(0, *col, g.sum());
                acc(*src, gs);
            }
            Op::GcnNorm { values, plan, inv_sqrt_deg, clamped } => {
                let v = val(*values);
                let out_pat = &plan.output;
                let n = out_pat.n_rows();
                // u = V (+ I) on the output pattern
                let mut u = vec![0.0; out_pat.nnz()];
                for (k, &slot) in plan.input_to_output.iter().enumerate() {
                    u[slot] += v.data()[k];
                }
                if let Some(diag) = &plan.diag {
                    for &slot in diag.iter() {
                        u[slot] += 1.0;
                    }
                }
                // dL/d(inv_sqrt_deg)
                let mut g_inv = vec![0.0; n];
                for i in 0..n {
                    for e in out_pat.row_range(i) {
                        let j = out_pat.col_idx()[e];
                        let t = g.data()[e] * u[e];
                        g_inv[i] += t * inv_sqrt_deg[j];
                        g_inv[j] += t * inv_sqrt_deg[i];
                    }
                }
                let g_deg: Vec<f64> = (0..n).map(|i| if clamped[i] { 0.0 } else { -0.5 * inv_sqrt_deg[i].powi(3) * g_inv[i] }).collect();
                let rows = plan.input.row_of_entries();
                let mut gv = vec![0.0; plan.input.nnz()];
                for (k, &slot) in plan.input_to_output.iter().enumerate() {
                    let (i, j) = (rows[k], plan.input.col_idx()[k]);
                    gv[k] = g.data()[slot] * inv_sqrt_deg[i] * inv_sqrt_deg[j] + g_deg[i];
                }
                acc(*values, Tensor::column(gv));
            }
            Op::SpMM { pattern, values, dense } => {
                let (v, h) = (val(*values), val(*dense));
                if wants(*values) {
                    let mut gv = vec![0.0; pattern.nnz()];
                    for i in 0..pattern.n_rows() {
                        let gi = g.row(i);
                        for e in pattern.row_range(i) {
                            let hj = h.row(pattern.col_idx()[e]);
                            gv[e] = gi.iter().zip(hj).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*values, Tensor::column(gv));
                }
                if wants(*dense) {
                    let mut gh = Tensor::zeros(h.rows(), h.cols());
                    for i in 0..pattern.n_rows() {
                        let gi = g.row(i);
                        for e in pattern.row_range(i) {
                            let a = v.data()[e];
                            if a == 0.0 {
                                continue;
                            }
                            for (x, y) in gh.row_mut(pattern.col_idx()[e]).iter_mut().zip(gi) {
                                *x += a * y;
                            }
                        }
                    }
                    acc(*dense, gh);
                }
            }
            Op::PairScores { pattern, z, w, b } => {
                let (vz, vw) = (val(*z), val(*w));
                let (n, d) = vz.shape();
                let mut gsa = vec![0.0; n];
                let mut gsb = vec![0.0; n];
                for (k, (i, j)) in pattern.coords().enumerate() {
                    gsa[i] += g.data()[k];
                    gsb[j] += g.data()[k];
                }
                let (wa, wb) = vw.data().split_at(d);
                if wants(*z) {
                    let mut gz = Tensor::zeros(n, d);
                    for i in 0..n {
                        for (c, x) in gz.row_mut(i).iter_mut().enumerate() {
                            *x = gsa[i] * wa[c] + gsb[i] * wb[c];
                        }
                    }
                    acc(*z, gz);
                }
                if wants(*w) {
                    let mut gw = vec![0.0; 2 * d];
                    for i in 0..n {
                        for (c, &zc) in vz.row(i).iter().enumerate() {
                            gw[c] += gsa[i] * zc;
                            gw[d + c] += gsb[i] * zc;
                        }
                    }
                    acc(*w, Tensor::column(gw));
                }
                acc(*b, Tensor::scalar(g.sum()));
            }
            Op::SegmentSoftmax { pattern, values } => {
                let mut gv = g.clone();
                for i in 0..pattern.n_rows() {
                    let r = pattern.row_range(i);
                    softmax_backward(&out.data()[r.clone()], &g.data()[r.clone()], &mut gv.data_mut()[r]);
                }
                acc(*values, gv);
            }
            Op::Scatter { values, map } => {
                let gv = map.iter().map(|&s| g.data()[s]).collect();
                acc(*values, Tensor::column(gv));
            }
            Op::RowScale { values, rows, weights } => {
                let (v, w) = (val(*values), val(*weights));
                acc(*values, Tensor::column(g.data().iter().zip(rows.iter()).map(|(g, &r)| g * w.data()[r]).collect()));
                if wants(*weights) {
                    let mut gw = Tensor::zeros(w.rows(), 1);
                    for ((g, x), &r) in g.data().iter().zip(v.data()).zip(rows.iter()) {
                        gw.data_mut()[r] += g * x;
                    }
                    acc(*weights, gw);
                }
            }
            Op::Gather { dense, pattern } => {
                let mut gd = Tensor::zeros(pattern.n_rows(), pattern.n_cols());
                for (k, (i, j)) in pattern.coords().enumerate() {
                    gd.set(i, j, g.data()[k]);
                }
                acc(*dense, gd);
            }
            Op::Densify { values, pattern } => {
                acc(*values, Tensor::column(pattern.coords().map(|(i, j)| g.get(i, j)).collect()));
            }
            Op::Confidence { o, epsilon, lambda, top } => {
                let vo = val(*o);
                let mut go = Tensor::zeros(vo.rows(), vo.cols());
                for (r, &(m, sm, active)) in top.iter().enumerate() {
                    let pi = out.data()[r];
                    let gp = g.data()[r] * pi * epsilon;
                    let om = vo.get(r, m);
                    let mut dm = if om > PROB_FLOOR { lambda / om } else { 0.0 };
                    if active {
                        let margin = om - vo.get(r, sm);
                        dm += (1.0 - lambda) / margin;
                        go.set(r, sm, -gp * (1.0 - lambda) / margin);
                    }
                    go.set(r, m, gp * dm);
                }
                acc(*o, go);
            }
            Op::CrossEntropy { o, targets } => {
                let vo = val(*o);
                let mut go = Tensor::zeros(vo.rows(), vo.cols());
                let gl = g.item();
                for &(i, y) in targets.iter() {
                    let p = vo.get(i, y);
                    if p > PROB_FLOOR {
                        go.set(i, y, go.get(i, y) - gl / p);
                    }
                }
                acc(*o, go);
            }
            Op::InfoNce { a, b, batch, tau, saved } => {
                let (ga, gb) = infonce_backward(saved, val(*a).rows(), batch, *tau, g.item());
                acc(*a, ga);
                acc(*b, gb);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("zip of equal shapes")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}

/// Index of the maximum and of the largest remaining entry; ties go to the smaller index.
pub(crate) fn top_two(row: &[f64]) -> (usize, usize) {
    let mut m = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[m] {
            m = k;
        }
    }
    let mut sm = usize::MAX;
    for (k, &x) in row.iter().enumerate() {
        if k != m && (sm == usize::MAX || x > row[sm]) {
            sm = k;
        }
    }
    (m, sm)
}

fn pair_halves(z: &Tensor, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = z.cols();
    let (wa, wb) = w.split_at(d);
    let mut sa = Vec::with_capacity(z.rows());
    let mut sb = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let r = z.row(i);
        sa.push(r.iter().zip(wa).map(|(x, y)| x * y).sum());
        sb.push(r.iter().zip(wb).map(|(x, y)| x * y).sum());
    }
    (sa, sb)
}

fn unit_rows(t: &Tensor, batch: &[usize]) -> (Tensor, Vec<f64>) {
    let mut out = t.gather_rows(batch);
    let mut norms = Vec::with_capacity(batch.len());
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
        norms.push(n);
    }
    (out, norms)
}

struct InfoNce {
    loss: f64,
    ua: Tensor,
    ub: Tensor,
    na: Vec<f64>,
    nb: Vec<f64>,
    /// Row-softmax plus column-softmax of the scaled similarities.
    p: Tensor,
}

/// Symmetric InfoNCE loss and the softmax sums its gradient needs.
fn infonce_forward(a: &Tensor, b: &Tensor, batch: &[usize], tau: f64) -> InfoNce {
    let (ua, na) = unit_rows(a, batch);
    let (ub, nb) = unit_rows(b, batch);
    let n = batch.len();
    let mut p = ua.matmul_t(&ub).expect("same width");
    let inv = 1.0 / tau;
    let diag: Vec<f64> = (0..n).map(|i| p.get(i, i) * inv).collect();
    let mut loss = -2.0 * diag.iter().sum::<f64>();
    if 2.0 * inv <= 600.0 {
        // Cosine similarities lie in [-1, 1], so one shared shift of 1/tau keeps
        // every exponent in [-2/tau, 0].
        p.data_mut().iter_mut().for_each(|x| *x = ((*x - 1.0) * inv).exp());
        let row: Vec<f64> = (0..n).map(|i| p.row(i).iter().sum()).collect();
        let mut col = vec![0.0; n];
        for i in 0..n {
            col.iter_mut().zip(p.row(i)).for_each(|(c, x)| *c += x);
        }
        loss += row.iter().chain(&col).map(|s| s.ln() + inv).sum::<f64>();
        let inv_col: Vec<f64> = col.iter().map(|c| 1.0 / c).collect();
        for (i, r) in row.iter().enumerate() {
            let ir = 1.0 / r;
            p.row_mut(i).iter_mut().zip(&inv_col).for_each(|(x, ic)| *x *= ir + ic);
        }
    } else {
        p.data_mut().iter_mut().for_each(|x| *x *= inv);
        let s = p.clone();
        for i in 0..n {
            let r = p.row_mut(i);
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse;
            r.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        for k in 0..n {
            let max = (0..n).map(|i| s.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..n).map(|i| (s.get(i, k) - max).exp()).sum::<f64>().ln();
            loss += lse;
            for i in 0..n {
                p.set(i, k, p.get(i, k) + (s.get(i, k) - lse).exp());
            }
        }
    }
    InfoNce { loss: loss / (2.0 * n as f64), ua, ub, na, nb, p }
}

/// Forward intermediates kept on the tape for the backward pass.
#[derive(Debug)]
struct InfoNceSaved {
    ua: Tensor,
    ub: Tensor,
    na: Vec<f64>,
    nb: Vec<f64>,
    p: Tensor,
}

fn infonce_backward(saved: &InfoNceSaved, rows: usize, batch: &[usize], tau: f64, gout: f64) -> (Tensor, Tensor) {
    let InfoNceSaved { ua, ub, na, nb, p } = saved;
    let mut gs = p.clone();
    let n = batch.len();
    let c = gout / (2.0 * n as f64 * tau);
    gs.data_mut().iter_mut().for_each(|x| *x *= c);
    for i in 0..n {
        gs.set(i, i, gs.get(i, i) - 2.0 * c);
    }
    let gua = gs.matmul(ub).expect("shape");
    let gub = gs.t_matmul(ua).expect("shape");
    let back = |u: &Tensor, gu: &Tensor, norms: &[f64]| {
        let mut g = Tensor::zeros(rows, u.cols());
        for (r, &node) in batch.iter().enumerate() {
            if norms[r] == 0.0 {
                continue;
            }
            let (ur, gr) = (u.row(r), gu.row(r));
            let dot: f64 = ur.iter().zip(gr).map(|(x, y)| x * y).sum();
            for ((o, &x), &y) in g.row_mut(node).iter_mut().zip(ur).zip(gr) {
                *o += (y - x * dot) / norms[r];
            }
        }
        g
    };
    (back(ua, &gua, na), back(ub, &gub, nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::full(2, 2, 3.0), true);
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0; 4]);
        assert!(matches!(t.backward(l), Err(Error::BackwardTwice)));
        t.reset();
        t.backward(l).unwrap();
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::zeros(2, 1), true);
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn softmax_rows_are_stable() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -1000.0]]).unwrap());
        let y = t.row_softmax(x);
        let v = t.value(y);
        for c in 0..3 {
            assert!((v.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v.get(1, 0) - 1.0).abs() < 1e-15);
        assert!(v.get(1, 1) >= 0.0 && v.get(1, 1) < 1e-300);
        assert!(v.all_finite());
    }

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vec![-1.0, -2.0, 0.5]));
        let slope = t.constant(Tensor::scalar(0.25));
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 0.5]);
        let p = t.prelu(x, slope).unwrap();
        assert_eq!(t.value(p).data(), &[-0.25, -0.5, 0.5]);
        let e = t.elu(x);
        assert!((t.value(e).get(0, 0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn top_two_breaks_ties_by_index() {
        assert_eq!(top_two(&[0.5, 0.5]), (0, 1));
        assert_eq!(top_two(&[0.1, 0.4, 0.4, 0.1]), (1, 2));
        assert_eq!(top_two(&[0.2, 0.1, 0.7]), (2, 0));
    }

    #[test]
    fn masked_softmax_zeroes_off_scope() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 5.0, -1.0]]).unwrap());
        let scope = Arc::new(Pattern::from_rows(3, vec![vec![0], vec![0, 2]]).unwrap());
        let y = t.masked_row_softmax(x, &scope).unwrap();
        let v = t.value(y);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.get(1, 1), 0.0);
        let e = 1.0f64.exp();
        assert!((v.get(1, 0) - e / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_scope_row_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(2, 2));
        let scope = Arc::new(Pattern::from_rows(2, vec![vec![0], vec![]]).unwrap());
        assert!(t.masked_row_softmax(x, &scope).is_err());
    }
}
