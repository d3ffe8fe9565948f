//! View estimator: one GCN layer embeds the nodes, a linear pair scorer rates
//! every scoped candidate edge, a scoped softmax turns scores into edge
//! probabilities, and the probabilities are added onto the basic view.

use std::sync::Arc;

use rand::Rng;

use crate::error::{arg, Result};
use crate::ndiff::{glorot_with, GcnPlan, Group, ParamSet, Tape, Tensor, Var};
use crate::sparse::Pattern;
use crate::views::{ScopeSet, View, ViewKind};

/// Parameter names of one estimator, all in group Ω.
#[derive(Debug, Clone)]
pub struct EstimatorParams {
    pub gcn_weight: String,
    pub pair_weight: String,
    pub pair_bias: String,
    pub mu: f64,
}

impl EstimatorParams {
    pub fn names(prefix: &str, mu: f64) -> Result<Self> {
        check_mu(mu)?;
        Ok(Self { gcn_weight: format!("{prefix}.gcn"), pair_weight: format!("{prefix}.pair_w"), pair_bias: format!("{prefix}.pair_b"), mu })
    }

    /// Registers freshly initialized parameters.
    pub fn init<R: Rng>(&self, params: &mut ParamSet, d_in: usize, d_es: usize, rng: &mut R) -> Result<()> {
        params.insert(&self.gcn_weight, Group::Omega, glorot_with(d_in, d_es, rng))?;
        params.insert(&self.pair_weight, Group::Omega, glorot_with(2 * d_es, 1, rng))?;
        params.insert(&self.pair_bias, Group::Omega, Tensor::scalar(0.0))?;
        Ok(())
    }
}

pub(crate) fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return arg(format!("mu must lie strictly inside (0, 1), got {mu}"));
    }
    Ok(())
}

/// `Z = elu(GCN(V, X))`, optionally followed by a pre-scaled dropout mask.
pub fn embed(tape: &mut Tape, plan: &GcnPlan, view_values: Var, x: Var, weight: Var, dropout: Option<Arc<Vec<f64>>>) -> Result<Var> {
    let h = tape.gcn_layer(plan, view_values, x, weight)?;
    let z = tape.elu(h);
    match dropout {
        Some(mask) => tape.mask(z, mask),
        None => Ok(z),
    }
}

/// Scores `W1 . [z_i || z_j] + b1` for every scoped pair.
pub fn pair_scores(tape: &mut Tape, z: Var, scope: &ScopeSet, pair_weight: Var, pair_bias: Var) -> Result<Var> {
    tape.pair_scores(scope.pattern(), z, pair_weight, pair_bias)
}

/// Scoped softmax of the pair scores; each node's probabilities sum to 1.
pub fn estimate_probabilities(tape: &mut Tape, scores: Var, scope: &ScopeSet) -> Result<Var> {
    tape.segment_softmax(scope.pattern(), scores)
}

/// Index plan for `V + mu P` on the union of the view support and the scope.
#[derive(Debug, Clone)]
pub struct BlendPlan {
    union: Arc<Pattern>,
    view_slots: Arc<Vec<usize>>,
    scope_slots: Arc<Vec<usize>>,
}

impl BlendPlan {
    pub fn new(view: &View, scope: &ScopeSet) -> Result<Self> {
        let (union, a, b) = view.pattern().union(scope.pattern())?;
        Ok(Self { union: Arc::new(union), view_slots: Arc::new(a), scope_slots: Arc::new(b) })
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.union
    }
}

/// `V_es = V + mu P` on the union support.
pub fn blend(tape: &mut Tape, plan: &BlendPlan, view_values: Var, probs: Var, mu: f64) -> Result<Var> {
    check_mu(mu)?;
    let len = plan.union.nnz();
    let v = tape.scatter(view_values, plan.view_slots.clone(), len)?;
    let p = tape.scatter(probs, plan.scope_slots.clone(), len)?;
    let p = tape.scale(p, mu);
    tape.add(v, p)
}

/// Non-differentiable `V + mu P` over explicit views.
pub fn blend_views(view: &View, probs: &View, mu: f64) -> Result<View> {
    check_mu(mu)?;
    let (union, a, b) = view.pattern().union(probs.pattern())?;
    let mut w = vec![0.0; union.nnz()];
    for (k, &s) in a.iter().enumerate() {
        w[s] += view.weights()[k];
    }
    for (k, &s) in b.iter().enumerate() {
        w[s] += mu * probs.weights()[k];
    }
    View::new(Arc::new(union), w, ViewKind::Estimated)
}
