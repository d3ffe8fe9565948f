//! Central finite-difference checks of every tape operation and of the full
//! view-estimator objective.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{basic_views, BasicView, ViewSettings};
use crate::error::Result;
use crate::graph::{Graph, Split, Splits};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::ndiff::{GcnPlan, Group, Tape, Tensor, Var, OP_NAMES};
use crate::sparse::Pattern;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Below this magnitude the error is measured in absolute terms.
const FLOOR: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// A scalar function of some tensors, recorded on a tape.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), inputs, build: Box::new(build) }
    }

    fn eval(&self, inputs: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    /// Operations recorded while building the case.
    pub ops: BTreeSet<&'static str>,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed) && self.missing_ops().is_empty()
    }

    /// Registered operations no case exercised.
    pub fn missing_ops(&self) -> Vec<&'static str> {
        let seen: BTreeSet<_> = self.cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
        OP_NAMES.iter().copied().filter(|o| !seen.contains(o)).collect()
    }

    /// Largest error over the cases that recorded each operation.
    pub fn per_op(&self) -> Vec<(&'static str, f64)> {
        OP_NAMES
            .iter()
            .map(|&op| {
                let e = self.cases.iter().filter(|c| c.ops.contains(op)).map(|c| c.max_rel_error).fold(f64::NAN, f64::max);
                (op, e)
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let status = if c.passed() { "ok" } else { "FAIL" };
            writeln!(s, "case {:<22} {:>5} entries  max rel err {:.3e}  {status}", c.name, c.checked, c.max_rel_error).expect("write");
        }
        for (op, e) in self.per_op() {
            let status = if e.is_nan() {
                "MISSING"
            } else if e < TOLERANCE {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(s, "op   {op:<22} max rel err {e:.3e}  {status}").expect("write");
        }
        writeln!(s, "{}", if self.passed() { "gradcheck passed" } else { "gradcheck FAILED" }).expect("write");
        s
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares reverse-mode gradients with central differences. `corrupt`
/// scales the analytic gradient, which must make a correct case fail.
pub fn check(case: &Case, corrupt: f64) -> Result<CaseReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let ops = tape.op_names();
    tape.backward(out)?;
    let grads: Vec<Tensor> =
        vars.iter().zip(&case.inputs).map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))).collect();
    let mut inputs = case.inputs.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..inputs.len() {
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            inputs[k].data_mut()[e] = orig + STEP;
            let up = case.eval(&inputs)?;
            inputs[k].data_mut()[e] = orig - STEP;
            let down = case.eval(&inputs)?;
            inputs[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[k].data()[e] * corrupt;
            worst = worst.max(rel_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(CaseReport { name: case.name.clone(), ops, max_rel_error: worst, checked })
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Entries bounded away from zero so kinks stay outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    rand_tensor(rng, rows, cols).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    rand_tensor(rng, rows, cols).map(|x| 1.5 + x)
}

/// Reduces any value to a scalar through a fixed random weighting, so every
/// output entry carries a distinct upstream gradient.
fn weigh(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, r, c));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn ring_pattern(n: usize, extra: &[(usize, usize)]) -> Arc<Pattern> {
    let mut coords: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, (i + 1) % n), ((i + 1) % n, i)]).collect();
    coords.extend_from_slice(extra);
    Arc::new(Pattern::from_coords(n, n, &coords).expect("ring pattern"))
}

/// One case per tape operation, on small random inputs.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = 6;
    let pat = ring_pattern(n, &[(0, 3), (2, 5), (4, 4)]);
    let nnz = pat.nnz();
    let mut cases = Vec::new();

    cases.push(Case::new("matmul", vec![rand_tensor(r, 4, 3), rand_tensor(r, 3, 5)], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        weigh(t, m, 1)
    }));
    cases.push(Case::new("add_sub", vec![rand_tensor(r, 3, 4), rand_tensor(r, 3, 4)], |t, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.sub(a, v[1])?;
        let s = t.sub(s, v[1])?;
        weigh(t, s, 2)
    }));
    cases.push(Case::new("mul_div", vec![rand_tensor(r, 3, 4), positive(r, 3, 4)], |t, v| {
        let m = t.mul(v[0], v[1])?;
        let d = t.div(m, v[1])?;
        let d = t.div(d, v[1])?;
        weigh(t, d, 3)
    }));
    cases.push(Case::new("add_row_scale", vec![rand_tensor(r, 4, 3), rand_tensor(r, 1, 3)], |t, v| {
        let a = t.add_row(v[0], v[1])?;
        let s = t.scale(a, -1.7);
        weigh(t, s, 4)
    }));
    cases.push(Case::new("activations", vec![away_from_zero(r, 4, 3)], |t, v| {
        let mut acc = None;
        for (k, f) in [Tape::relu, Tape::elu, Tape::tanh, Tape::sigmoid].into_iter().enumerate() {
            let a = f(t, v[0]);
            let w = weigh(t, a, 10 + k as u64)?;
            acc = Some(match acc {
                None => w,
                Some(p) => t.add(p, w)?,
            });
        }
        let id = t.activation(v[0], crate::ndiff::Activation::Identity);
        let w = weigh(t, id, 15)?;
        t.add(acc.expect("four activations"), w)
    }));
    cases.push(Case::new("prelu", vec![away_from_zero(r, 4, 3), Tensor::scalar(0.25)], |t, v| {
        let p = t.prelu(v[0], v[1])?;
        weigh(t, p, 5)
    }));
    cases.push(Case::new("row_softmax", vec![rand_tensor(r, 4, 5)], |t, v| {
        let p = t.row_softmax(v[0]);
        weigh(t, p, 6)
    }));
    let drop = Arc::new((0..12).map(|k| if k % 3 == 0 { 0.0 } else { 1.5 }).collect::<Vec<_>>());
    cases.push(Case::new("mask", vec![rand_tensor(r, 4, 3)], move |t, v| {
        let m = t.mask(v[0], drop.clone())?;
        weigh(t, m, 7)
    }));
    cases.push(Case::new("broadcast_entry", vec![rand_tensor(r, 1, 3)], |t, v| {
        let b = t.broadcast_entry(v[0], 1, 5)?;
        weigh(t, b, 8)
    }));
    for self_loops in [true, false] {
        let plan = GcnPlan::new(pat.clone(), self_loops).expect("plan");
        let name = if self_loops { "gcn_layer" } else { "gcn_layer_no_loops" };
        cases.push(Case::new(name, vec![positive(r, nnz, 1), rand_tensor(r, n, 3), rand_tensor(r, 3, 2)], move |t, v| {
            let g = t.gcn_layer(&plan, v[0], v[1], v[2])?;
            weigh(t, g, 9)
        }));
    }
    let p = pat.clone();
    cases.push(Case::new("pair_scores_softmax", vec![rand_tensor(r, n, 3), rand_tensor(r, 6, 1), Tensor::scalar(0.3)], move |t, v| {
        let s = t.pair_scores(&p, v[0], v[1], v[2])?;
        let a = t.tanh(s);
        let sm = t.segment_softmax(&p, a)?;
        weigh(t, sm, 11)
    }));
    let map = Arc::new(vec![4, 0, 2, 2, 7]);
    cases.push(Case::new("scatter", vec![rand_tensor(r, 5, 1)], move |t, v| {
        let s = t.scatter(v[0], map.clone(), 8)?;
        weigh(t, s, 12)
    }));
    let rows = Arc::new(vec![0, 1, 1, 3, 2, 0]);
    cases.push(Case::new("row_scale", vec![rand_tensor(r, 6, 1), rand_tensor(r, 4, 1)], move |t, v| {
        let s = t.row_scale(v[0], rows.clone(), v[1])?;
        weigh(t, s, 13)
    }));
    let p = pat.clone();
    cases.push(Case::new("gather_densify", vec![rand_tensor(r, n, n)], move |t, v| {
        let d = t.masked_row_softmax(v[0], &p)?;
        weigh(t, d, 14)
    }));
    // Rows with well separated top-two probabilities keep argmax fixed.
    let logits = Tensor::new(4, 3, vec![2.0, 0.5, -1.0, -0.3, 1.6, 0.1, 0.4, -0.8, 1.9, 1.1, -0.2, 0.2]).expect("shape");
    cases.push(Case::new("confidence", vec![logits.clone()], |t, v| {
        let o = t.row_softmax(v[0]);
        let pi = t.confidence(o, 0.1, 0.5, 0.01)?;
        weigh(t, pi, 16)
    }));
    cases.push(Case::new("confidence_floor", vec![logits], |t, v| {
        let o = t.row_softmax(v[0]);
        let pi = t.confidence(o, 0.1, 0.3, 0.6)?;
        weigh(t, pi, 17)
    }));
    let targets = Arc::new(vec![(0, 2), (1, 0), (3, 1), (1, 0)]);
    cases.push(Case::new("cross_entropy", vec![rand_tensor(r, 4, 3)], move |t, v| {
        let o = t.row_softmax(v[0]);
        t.cross_entropy(o, targets.clone())
    }));
    let batch = Arc::new(vec![0, 2, 3, 5, 6]);
    cases.push(Case::new("infonce", vec![rand_tensor(r, 7, 4), rand_tensor(r, 7, 4)], move |t, v| {
        t.infonce(v[0], v[1], batch.clone(), 0.5)
    }));
    let single = Arc::new(vec![1, 4]);
    cases.push(Case::new("infonce_sum", vec![rand_tensor(r, 5, 3), rand_tensor(r, 5, 3)], move |t, v| {
        let l = t.infonce(v[0], v[1], single.clone(), 0.2)?;
        let s = t.sum(v[0]);
        t.add(l, s)
    }));
    cases
}

/// A small model whose view-estimator objective `L_cls - eta * L_MI` is
/// checked end to end with respect to every estimator parameter.
pub fn pipeline_case(seed: u64, eta: f64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 10;
    let features = rand_tensor(&mut rng, n, 4);
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).chain([(0, 5), (2, 7), (3, 8)]).collect();
    let splits = Splits { train: vec![0, 1, 2, 3, 4, 5], val: vec![6, 7], test: vec![8, 9] };
    let graph = Graph::new(features.clone(), labels, &edges, splits)?;
    let settings = ViewSettings { top_h: 4, knn_k: 3, ..ViewSettings::default() };
    let (views, scopes) = basic_views(&graph, [BasicView::Diffusion, BasicView::Knn], &settings, seed)?;
    let cfg = ModelConfig { hidden: 5, d_es: 4, d_mi: 3, ve_drop: 0.3, ..ModelConfig::default() };
    let model = Arc::new(Model::new(features, 3, views, scopes, cfg)?);
    let params = model.init_params(seed)?;
    let omega: Vec<String> = params.names_in(Group::Omega).map(str::to_string).collect();
    let inputs = omega.iter().map(|k| params.value(k).clone()).collect();
    let targets = Arc::new(graph.labels_for(Split::Train));
    let batch = Arc::new((0..n).collect::<Vec<_>>());
    Ok(Case::new("omega_objective", inputs, move |t, v| {
        let mut bound = params.bind(t, &[]);
        for (k, name) in omega.iter().enumerate() {
            bound.replace(name, v[k]);
        }
        // A fixed mask seed keeps estimator dropout identical across evaluations.
        let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
        let opts = ForwardOptions { estimator_dropout: true, classifier_dropout: false };
        let fwd = model.forward(t, &bound, opts, &mut mask_rng)?;
        let cls = model.loss_cls(t, &fwd, &targets)?;
        let (mi, _) = model.loss_mi(t, &bound, &fwd, &batch)?;
        let scaled = t.scale(mi, eta);
        t.sub(cls, scaled)
    }))
}

/// Every operation case plus the composed objective.
pub fn suite_cases() -> Result<Vec<Case>> {
    let mut cases = op_cases(7);
    cases.push(pipeline_case(3, 0.5)?);
    Ok(cases)
}

pub fn run_suite(corrupt: f64) -> Result<SuiteReport> {
    let cases = suite_cases()?;
    let reports = cases.iter().map(|c| check(c, corrupt)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { cases: reports })
}
