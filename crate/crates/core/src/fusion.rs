//! Per-view classifiers and confidence-driven node-wise fusion of the two
//! estimated views.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::ndiff::{glorot_with, GcnPlan, Group, ParamSet, Tape, Tensor, Var};
use crate::sparse::Pattern;
use crate::views::{View, ViewKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    Adaptive,
    Average,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub epsilon: f64,
    pub lambda: f64,
    /// Floor on the top-two margin inside the logarithm.
    pub delta: f64,
    pub variant: FusionVariant,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, lambda: 0.5, delta: 1e-8, variant: FusionVariant::Adaptive }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return arg(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return arg(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.delta > 0.0) {
            return arg(format!("delta must be positive, got {}", self.delta));
        }
        Ok(())
    }
}

/// Two-layer GCN classifier weights (group Θ).
#[derive(Debug, Clone)]
pub struct ClassifierParams {
    pub hidden: String,
    pub output: String,
}

impl ClassifierParams {
    pub fn names(prefix: &str) -> Self {
        Self { hidden: format!("{prefix}.w0"), output: format!("{prefix}.w1") }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamSet, d_in: usize, d_hidden: usize, n_classes: usize, rng: &mut R) -> Result<()> {
        params.insert(&self.hidden, Group::Theta, glorot_with(d_in, d_hidden, rng))?;
        params.insert(&self.output, Group::Theta, glorot_with(d_hidden, n_classes, rng))?;
        Ok(())
    }
}

/// Dropout masks applied to the classifier input and hidden layer.
#[derive(Debug, Clone, Default)]
pub struct ClassifierDropout {
    pub input: Option<Arc<Vec<f64>>>,
    pub hidden: Option<Arc<Vec<f64>>>,
}

/// `softmax(GCN(V, elu(GCN(V, X))))`.
pub fn predict(tape: &mut Tape, plan: &GcnPlan, view_values: Var, x: Var, w0: Var, w1: Var, dropout: &ClassifierDropout) -> Result<Var> {
    let x = match &dropout.input {
        Some(m) => tape.mask(x, m.clone())?,
        None => x,
    };
    let h = tape.gcn_layer(plan, view_values, x, w0)?;
    let mut h = tape.elu(h);
    if let Some(m) = &dropout.hidden {
        h = tape.mask(h, m.clone())?;
    }
    let logits = tape.gcn_layer(plan, view_values, h, w1)?;
    Ok(tape.row_softmax(logits))
}

/// Node-wise importance of one view's predictions.
pub fn confidence(tape: &mut Tape, o: Var, cfg: &FusionConfig) -> Result<Var> {
    tape.confidence(o, cfg.epsilon, cfg.lambda, cfg.delta)
}

/// `beta^1 = pi^1 / (pi^1 + pi^2)`, `beta^2 = pi^2 / (pi^1 + pi^2)`.
pub fn fuse_weights(tape: &mut Tape, pi1: Var, pi2: Var) -> Result<(Var, Var)> {
    let total = tape.add(pi1, pi2)?;
    Ok((tape.div(pi1, total)?, tape.div(pi2, total)?))
}

/// Index plan for the row-wise combination of two estimated views.
#[derive(Debug, Clone)]
pub struct FusePlan {
    union: Arc<Pattern>,
    slots1: Arc<Vec<usize>>,
    slots2: Arc<Vec<usize>>,
    rows: Arc<Vec<usize>>,
}

impl FusePlan {
    pub fn new(p1: &Pattern, p2: &Pattern) -> Result<Self> {
        let (union, a, b) = p1.union(p2)?;
        let rows = union.row_of_entries();
        Ok(Self { union: Arc::new(union), slots1: Arc::new(a), slots2: Arc::new(b), rows: Arc::new(rows) })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.union
    }
}

/// `V*_i = beta^1_i V^1_es,i + beta^2_i V^2_es,i`.
pub fn fuse_views(tape: &mut Tape, plan: &FusePlan, v1: Var, v2: Var, beta1: Var, beta2: Var) -> Result<Var> {
    let len = plan.union.nnz();
    let a = tape.scatter(v1, plan.slots1.clone(), len)?;
    let b = tape.scatter(v2, plan.slots2.clone(), len)?;
    let a = tape.row_scale(a, plan.rows.clone(), beta1)?;
    let b = tape.row_scale(b, plan.rows.clone(), beta2)?;
    tape.add(a, b)
}

/// Constant weights of one half for both views.
pub fn average_weights(tape: &mut Tape, n: usize) -> (Var, Var) {
    let b = tape.constant(Tensor::full(n, 1, 0.5));
    (b, b)
}

/// Softmax over two learned gate logits (`1 x 2`), shared by all nodes.
pub fn attention_weights(tape: &mut Tape, gate: Var, n: usize) -> Result<(Var, Var)> {
    let g = tape.row_softmax(gate);
    Ok((tape.broadcast_entry(g, 0, n)?, tape.broadcast_entry(g, 1, n)?))
}

/// Non-differentiable fusion over explicit views.
pub fn fuse_views_static(v1: &View, v2: &View, beta1: &[f64], beta2: &[f64]) -> Result<View> {
    let n = v1.n();
    if v2.n() != n || beta1.len() != n || beta2.len() != n {
        return Err(crate::Error::Shape(format!("fusing views {} and {} with weights {} and {}", n, v2.n(), beta1.len(), beta2.len())));
    }
    let (union, a, b) = v1.pattern().union(v2.pattern())?;
    let rows = union.row_of_entries();
    let mut w = vec![0.0; union.nnz()];
    for (k, &s) in a.iter().enumerate() {
        w[s] += beta1[rows[s]] * v1.weights()[k];
    }
    for (k, &s) in b.iter().enumerate() {
        w[s] += beta2[rows[s]] * v2.weights()[k];
    }
    View::new(Arc::new(union), w, ViewKind::Fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi(tape: &mut Tape, rows: &[Vec<f64>], cfg: &FusionConfig) -> Vec<f64> {
        let o = tape.constant(Tensor::from_rows(rows).unwrap());
        let p = confidence(tape, o, cfg).unwrap();
        tape.value(p).data().to_vec()
    }

    #[test]
    fn sharp_rows_beat_smooth_rows() {
        let mut t = Tape::new();
        let cfg = FusionConfig { epsilon: 0.1, lambda: 0.5, ..Default::default() };
        let p = pi(&mut t, &[vec![0.8, 0.1, 0.1], vec![0.4, 0.3, 0.3]], &cfg);
        assert!(p[0] > p[1]);
    }

    #[test]
    fn larger_margin_wins_at_equal_max() {
        let mut t = Tape::new();
        let p = pi(&mut t, &[vec![0.5, 0.4, 0.1], vec![0.5, 0.25, 0.25]], &FusionConfig::default());
        assert!(p[1] > p[0]);
    }

    #[test]
    fn tied_top_two_is_finite() {
        let mut t = Tape::new();
        let p = pi(&mut t, &[vec![0.5, 0.5]], &FusionConfig::default());
        assert!(p[0].is_finite() && p[0] > 0.0);
    }

    #[test]
    fn lambda_one_ignores_margin() {
        let mut t = Tape::new();
        let cfg = FusionConfig { lambda: 1.0, ..Default::default() };
        let p = pi(&mut t, &[vec![0.6, 0.2, 0.2], vec![0.6, 0.3, 0.1]], &cfg);
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn single_class_rejected() {
        let mut t = Tape::new();
        let o = t.constant(Tensor::column(vec![1.0, 1.0]));
        assert!(confidence(&mut t, o, &FusionConfig::default()).is_err());
    }

    #[test]
    fn weights_from_importance() {
        let mut t = Tape::new();
        let p1 = t.constant(Tensor::column(vec![1.0, 2.0]));
        let p2 = t.constant(Tensor::column(vec![1.0, 1.0]));
        let (b1, b2) = fuse_weights(&mut t, p1, p2).unwrap();
        assert_eq!(t.value(b1).data(), &[0.5, 2.0 / 3.0]);
        assert_eq!(t.value(b2).data(), &[0.5, 1.0 / 3.0]);
    }

    #[test]
    fn identical_views_survive_any_weights() {
        let v = View::from_undirected(4, &[(0, 1), (2, 3), (1, 3)], ViewKind::Adjacency, true).unwrap();
        let b1 = [0.1, 0.7, 0.5, 0.99];
        let b2: Vec<f64> = b1.iter().map(|b| 1.0 - b).collect();
        let f = fuse_views_static(&v, &v, &b1, &b2).unwrap();
        assert_eq!(f.pattern(), v.pattern());
        for (x, y) in f.weights().iter().zip(v.weights()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_gate_logits_average() {
        let mut t = Tape::new();
        let gate = t.constant(Tensor::new(1, 2, vec![0.3, 0.3]).unwrap());
        let (a1, a2) = attention_weights(&mut t, gate, 3).unwrap();
        let (m1, m2) = average_weights(&mut t, 3);
        assert_eq!(t.value(a1), t.value(m1));
        assert_eq!(t.value(a2), t.value(m2));
    }
}
