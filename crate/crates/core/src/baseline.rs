//! Plain two-layer GCN on a fixed view, used as the comparison backbone.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::fusion::{self, ClassifierDropout, ClassifierParams};
use crate::graph::{Graph, Split};
use crate::metrics;
use crate::ndiff::{adam_step, AdamState, GcnPlan, Group, ParamSet, Tape, Tensor};
use crate::views::View;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub self_loops: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.01, hidden: 16, dropout: 0.5, weight_decay: 5e-4, self_loops: true }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    /// Class distributions of the best-on-validation epoch, all nodes.
    pub predictions: Tensor,
    pub best_epoch: usize,
}

fn mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Option<Arc<Vec<f64>>> {
    (p > 0.0).then(|| {
        let keep = 1.0 - p;
        Arc::new((0..len).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect())
    })
}

/// Trains `softmax(GCN(V, elu(GCN(V, X))))` with sum-form cross-entropy and
/// keeps the epoch with the best validation F1-micro (ties to lower loss).
pub fn train_gcn(graph: &Graph, view: &View, cfg: &BaselineConfig, seed: u64) -> Result<BaselineRun> {
    if !(0.0..1.0).contains(&cfg.dropout) {
        return arg(format!("dropout must lie in [0, 1), got {}", cfg.dropout));
    }
    if view.n() != graph.n_nodes() {
        return Err(Error::Shape(format!("view over {} nodes, graph has {}", view.n(), graph.n_nodes())));
    }
    let n = graph.n_nodes();
    let d = graph.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ClassifierParams::names("gcn");
    let mut params = ParamSet::new();
    names.init(&mut params, d, cfg.hidden, graph.n_classes(), &mut rng)?;
    let plan = GcnPlan::new(view.pattern().clone(), cfg.self_loops)?;
    let weights = Tensor::column(view.weights().to_vec());
    let train = Arc::new(graph.labels_for(Split::Train));
    let mut val = graph.labels_for(Split::Val);
    if val.is_empty() {
        val = train.as_ref().clone();
    }
    let val = Arc::new(val);
    let mut adam = AdamState::default();
    let mut best: Option<(f64, f64, usize, Tensor)> = None;

    for epoch in 1..=cfg.epochs {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[Group::Theta]);
        let x = tape.constant(graph.features().clone());
        let v = tape.constant(weights.clone());
        let dropout = ClassifierDropout { input: mask(&mut rng, n * d, cfg.dropout), hidden: mask(&mut rng, n * cfg.hidden, cfg.dropout) };
        let o = fusion::predict(&mut tape, &plan, v, x, bound.get(&names.hidden), bound.get(&names.output), &dropout)?;
        let loss = tape.cross_entropy(o, train.clone())?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::Divergence(format!("baseline loss not finite at epoch {epoch}")));
        }
        tape.backward(loss)?;
        let mut grads = params.collect_grads(&tape, &bound, Group::Theta);
        for (name, g) in grads.iter_mut() {
            let p = params.value(name);
            g.data_mut().iter_mut().zip(p.data()).for_each(|(g, p)| *g += cfg.weight_decay * p);
        }
        adam_step(&mut params, &grads, &mut adam, cfg.lr, Group::Theta)?;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &[]);
        let x = tape.constant(graph.features().clone());
        let v = tape.constant(weights.clone());
        let o = fusion::predict(&mut tape, &plan, v, x, bound.get(&names.hidden), bound.get(&names.output), &ClassifierDropout::default())?;
        let vl = tape.cross_entropy(o, val.clone())?;
        let val_loss = tape.value(vl).item();
        let probs = tape.value(o);
        let f1 = metrics::evaluate(probs, &val)?.f1_micro;
        let better = match &best {
            None => true,
            Some((bf, bl, _, _)) => f1 > *bf || (f1 == *bf && val_loss < *bl),
        };
        if better {
            best = Some((f1, val_loss, epoch, probs.clone()));
        }
    }
    let (_, _, best_epoch, predictions) = best.ok_or_else(|| Error::Argument("epochs must be positive".into()))?;
    Ok(BaselineRun { predictions, best_epoch })
}
