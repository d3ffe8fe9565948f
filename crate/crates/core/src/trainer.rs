//! Alternating optimization of the estimator (Ω), classifier (Θ) and MI (Φ)
//! parameter groups with best-on-validation snapshotting.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::graph::{Graph, Split};
use crate::metrics::{self, Metrics};
use crate::model::{ForwardOptions, Frozen, Model, ModelConfig, FUSED};
use crate::ndiff::{adam_step, AdamState, Group, ParamSet, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Outer iterations.
    pub iterations: usize,
    pub rho_theta: usize,
    pub rho_phi: usize,
    pub rho_omega: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_omega: f64,
    /// L2 penalty added to the gradients of each group.
    pub wd_theta: f64,
    pub wd_phi: f64,
    pub wd_omega: f64,
    /// Weight of the MI term subtracted from the Ω loss. Zero disables it.
    pub eta: f64,
    /// MI batch size; `None` uses every node.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Stop after this many iterations without a new best snapshot.
    pub patience: Option<usize>,
    /// Iterations that are logged but never kept as the best snapshot. When
    /// no iteration is eligible the final parameters are kept.
    pub select_after: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            rho_theta: 1,
            rho_phi: 5,
            rho_omega: 1,
            lr_theta: 0.01,
            lr_phi: 0.01,
            lr_omega: 0.001,
            wd_theta: 5e-4,
            wd_phi: 0.0,
            wd_omega: 0.0,
            eta: 0.1,
            batch_size: None,
            seed: 0,
            patience: None,
            select_after: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_phi", self.lr_phi), ("lr_omega", self.lr_omega)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return arg(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, wd) in [("wd_theta", self.wd_theta), ("wd_phi", self.wd_phi), ("wd_omega", self.wd_omega)] {
            if !(wd >= 0.0 && wd.is_finite()) {
                return arg(format!("{name} must be non-negative, got {wd}"));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return arg(format!("eta must be non-negative, got {}", self.eta));
        }
        if self.batch_size == Some(0) {
            return arg("batch_size must be positive");
        }
        Ok(())
    }
}

/// Number of optimizer steps taken per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepCounts {
    pub theta: usize,
    pub phi: usize,
    pub omega: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss_cls: f64,
    /// Sum of the three pairwise contrastive losses.
    pub loss_mi: f64,
    /// Fused/first, fused/second and first/second terms.
    pub mi_terms: [f64; 3],
    pub loss_omega: f64,
    pub val_f1_micro: f64,
    pub val_f1_macro: f64,
    pub val_loss: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub best_iteration: usize,
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub val_f1_micro: f64,
    pub val_loss: f64,
    pub params: ParamSet,
}

/// Owns the model, parameters, optimizer state and RNG of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    train_targets: Arc<Vec<(usize, usize)>>,
    val_targets: Arc<Vec<(usize, usize)>>,
    params: ParamSet,
    adam: [AdamState; 3],
    rng: ChaCha8Rng,
    iteration: usize,
    steps: StepCounts,
    best: Option<Snapshot>,
    history: Vec<IterationRecord>,
}

fn group_index(g: Group) -> usize {
    match g {
        Group::Theta => 0,
        Group::Phi => 1,
        Group::Omega => 2,
    }
}

impl Trainer {
    /// Targets come from `graph`'s train and validation splits; the model must
    /// have been built over the same nodes.
    pub fn new(model: Model, graph: &Graph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.n_nodes() != graph.n_nodes() {
            return Err(Error::Shape(format!("model over {} nodes, graph has {}", model.n_nodes(), graph.n_nodes())));
        }
        let train = graph.labels_for(Split::Train);
        let mut val = graph.labels_for(Split::Val);
        if val.is_empty() {
            log::warn!("validation split is empty; selecting snapshots on the train split");
            val = train.clone();
        }
        let params = model.init_params(cfg.seed)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9)),
            model,
            cfg,
            train_targets: Arc::new(train),
            val_targets: Arc::new(val),
            params,
            adam: [AdamState::default(), AdamState::default(), AdamState::default()],
            iteration: 0,
            steps: StepCounts::default(),
            best: None,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) {
        self.params = params;
    }

    pub fn steps(&self) -> StepCounts {
        self.steps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn best(&self) -> Option<&Snapshot> {
        self.best.as_ref()
    }

    fn mi_batch(&mut self) -> Arc<Vec<usize>> {
        let n = self.model.n_nodes();
        match self.cfg.batch_size {
            Some(b) if b < n => {
                let mut idx = rand::seq::index::sample(&mut self.rng, n, b).into_vec();
                idx.sort_unstable();
                Arc::new(idx)
            }
            _ => Arc::new((0..n).collect()),
        }
    }

    fn diverged(&self, what: &str, value: f64) -> Error {
        let norms: Vec<String> = Group::ALL.iter().map(|&g| format!("{g:?}={:.4e}", self.params.group_norm(g))).collect();
        Error::Divergence(format!("{what} became {value} at iteration {} (parameter norms: {})", self.iteration, norms.join(", ")))
    }

    fn apply(&mut self, tape: &Tape, bound: &crate::ndiff::Bound, group: Group, lr: f64) -> Result<()> {
        let mut grads = self.params.collect_grads(tape, bound, group);
        let wd = match group {
            Group::Theta => self.cfg.wd_theta,
            Group::Phi => self.cfg.wd_phi,
            Group::Omega => self.cfg.wd_omega,
        };
        if wd > 0.0 {
            for (name, g) in grads.iter_mut() {
                let p = self.params.value(name);
                g.data_mut().iter_mut().zip(p.data()).for_each(|(g, p)| *g += wd * p);
            }
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(self.diverged(&format!("gradient of {name}"), f64::NAN));
        }
        adam_step(&mut self.params, &grads, &mut self.adam[group_index(group)], lr, group)
    }

    /// One step on Ω minimizing `L_cls - eta * L_MI`. Returns that loss.
    pub fn step_omega(&mut self) -> Result<f64> {
        let batch = (self.cfg.eta > 0.0).then(|| self.mi_batch());
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[Group::Omega]);
        let opts = ForwardOptions { estimator_dropout: true, classifier_dropout: false };
        let fwd = self.model.forward(&mut tape, &bound, opts, &mut self.rng)?;
        let mut loss = self.model.loss_cls(&mut tape, &fwd, &self.train_targets)?;
        if let Some(batch) = batch {
            let (mi, _) = self.model.loss_mi(&mut tape, &bound, &fwd, &batch)?;
            let scaled = tape.scale(mi, self.cfg.eta);
            loss = tape.sub(loss, scaled)?;
        }
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(self.diverged("omega loss", value));
        }
        tape.backward(loss)?;
        self.apply(&tape, &bound, Group::Omega, self.cfg.lr_omega)?;
        self.steps.omega += 1;
        Ok(value)
    }

    /// One step on Θ minimizing `L_cls`. Returns that loss.
    pub fn step_theta(&mut self) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[Group::Theta]);
        let opts = ForwardOptions { estimator_dropout: false, classifier_dropout: true };
        let fwd = self.model.forward(&mut tape, &bound, opts, &mut self.rng)?;
        let loss = self.model.loss_cls(&mut tape, &fwd, &self.train_targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(self.diverged("classification loss", value));
        }
        tape.backward(loss)?;
        self.apply(&tape, &bound, Group::Theta, self.cfg.lr_theta)?;
        self.steps.theta += 1;
        Ok(value)
    }

    /// One step on Φ minimizing `L_MI` on a fresh batch. Returns that loss.
    pub fn step_phi(&mut self) -> Result<f64> {
        let frozen = self.model.frozen(&self.params)?;
        self.step_phi_on(&frozen)
    }

    /// Φ steps see Ω and Θ frozen and run without dropout, so the views they
    /// consume are identical across a block of Φ steps and computed once.
    fn step_phi_on(&mut self, frozen: &Frozen) -> Result<f64> {
        let batch = self.mi_batch();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[Group::Phi]);
        let (loss, _) = self.model.loss_mi_frozen(&mut tape, &bound, frozen, &batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(self.diverged("MI loss", value));
        }
        tape.backward(loss)?;
        self.apply(&tape, &bound, Group::Phi, self.cfg.lr_phi)?;
        self.steps.phi += 1;
        Ok(value)
    }

    /// Runs one outer iteration: Ω steps, then Θ steps, then Φ steps, then a
    /// dropout-free evaluation that may replace the best snapshot.
    pub fn iterate(&mut self) -> Result<&IterationRecord> {
        self.iteration += 1;
        for _ in 0..self.cfg.rho_omega {
            self.step_omega()?;
        }
        for _ in 0..self.cfg.rho_theta {
            self.step_theta()?;
        }
        let frozen = self.model.frozen(&self.params)?;
        for _ in 0..self.cfg.rho_phi {
            self.step_phi_on(&frozen)?;
        }
        let record = self.evaluate_iteration(&frozen)?;
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    fn evaluate_iteration(&mut self, frozen: &Frozen) -> Result<IterationRecord> {
        let batch = self.mi_batch();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, &[]);
        let (mi, terms) = self.model.loss_mi_frozen(&mut tape, &bound, frozen, &batch)?;
        let mut loss_cls = 0.0;
        for o in &frozen.predictions {
            let o = tape.constant(o.clone());
            let ce = tape.cross_entropy(o, self.train_targets.clone())?;
            loss_cls += tape.value(ce).item();
        }
        let star = tape.constant(frozen.predictions[FUSED].clone());
        let val_ce = tape.cross_entropy(star, self.val_targets.clone())?;
        let loss_mi = tape.value(mi).item();
        let val_loss = tape.value(val_ce).item() / self.val_targets.len() as f64;
        let m = metrics::evaluate(&frozen.predictions[FUSED], &self.val_targets)?;
        let beta = frozen.beta.data();
        let mean = beta.iter().sum::<f64>() / beta.len() as f64;
        let var = beta.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / beta.len() as f64;
        for (name, v) in [("classification loss", loss_cls), ("MI loss", loss_mi), ("validation loss", val_loss)] {
            if !v.is_finite() {
                return Err(self.diverged(name, v));
            }
        }

        let better = self.iteration > self.cfg.select_after
            && match &self.best {
                None => true,
                Some(b) => m.f1_micro > b.val_f1_micro || (m.f1_micro == b.val_f1_micro && val_loss < b.val_loss),
            };
        if better {
            self.best = Some(Snapshot { iteration: self.iteration, val_f1_micro: m.f1_micro, val_loss, params: self.params.clone() });
        }
        Ok(IterationRecord {
            iteration: self.iteration,
            loss_cls,
            loss_mi,
            mi_terms: terms.map(|t| tape.value(t).item()),
            loss_omega: loss_cls - self.cfg.eta * loss_mi,
            val_f1_micro: m.f1_micro,
            val_f1_macro: m.f1_macro,
            val_loss,
            beta_mean: mean,
            beta_std: var.sqrt(),
            best_iteration: self.best.as_ref().map_or(0, |b| b.iteration),
        })
    }

    /// Runs the configured number of iterations (or until patience runs out),
    /// then restores the best snapshot.
    pub fn train(&mut self) -> Result<()> {
        self.train_with(|_| {})
    }

    pub fn train_with<F: FnMut(&IterationRecord)>(&mut self, mut on_iteration: F) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let record = self.iterate()?;
            on_iteration(record);
            if let (Some(p), Some(best)) = (self.cfg.patience, &self.best) {
                if self.iteration - best.iteration >= p {
                    log::info!("early stop at iteration {} (best {})", self.iteration, best.iteration);
                    break;
                }
            }
        }
        self.restore_best();
        Ok(())
    }

    pub fn restore_best(&mut self) {
        if let Some(best) = &self.best {
            self.params = best.params.clone();
        }
    }

    /// Fused-classifier class distributions for all nodes, without dropout.
    pub fn predict(&self) -> Result<Tensor> {
        let [_, _, star] = self.model.frozen(&self.params)?.predictions;
        Ok(star)
    }

    pub fn evaluate(&self, graph: &Graph, split: Split) -> Result<Metrics> {
        metrics::evaluate(&self.predict()?, &graph.labels_for(split))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Splits;
    use crate::views::{knn_view, scope_khop, ViewKind};

    fn toy() -> (Graph, Model) {
        toy_with(ModelConfig::default())
    }

    fn toy_with(mcfg: ModelConfig) -> (Graph, Model) {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let c = (i % 2) as f64;
                vec![c + 0.1 * i as f64 / 12.0, 1.0 - c, 0.3 * (i % 3) as f64]
            })
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let splits = Splits { train: vec![0, 1, 2, 3], val: vec![4, 5, 6, 7], test: vec![8, 9, 10, 11] };
        let x = Tensor::from_rows(&rows).unwrap();
        let g = Graph::new(x.clone(), labels, &[], splits).unwrap();
        let k = knn_view(&x, 3).unwrap();
        let a = crate::views::View::from_undirected(12, &crate::views::knn_edges(&x, 2).unwrap(), ViewKind::Adjacency, false).unwrap();
        let scopes = [scope_khop(&k, 1).unwrap(), scope_khop(&a, 1).unwrap()];
        let model = Model::new(x, 2, [k, a], scopes, mcfg).unwrap();
        (g, model)
    }

    fn cfg() -> TrainConfig {
        TrainConfig { iterations: 4, rho_phi: 2, lr_omega: 0.01, ..TrainConfig::default() }
    }

    #[test]
    fn step_counts_follow_schedule() {
        let (g, m) = toy();
        let mut t = Trainer::new(m, &g, TrainConfig { rho_theta: 2, rho_phi: 3, rho_omega: 1, ..cfg() }).unwrap();
        t.train().unwrap();
        assert_eq!(t.steps(), StepCounts { theta: 8, phi: 12, omega: 4 });
        assert_eq!(t.history().len(), 4);
    }

    #[test]
    fn each_step_touches_only_its_group() {
        let (g, m) = toy();
        let mut t = Trainer::new(m, &g, cfg()).unwrap();
        for (group, step) in [
            (Group::Omega, Trainer::step_omega as fn(&mut Trainer) -> Result<f64>),
            (Group::Theta, Trainer::step_theta),
            (Group::Phi, Trainer::step_phi),
        ] {
            let before = t.params().clone();
            step(&mut t).unwrap();
            for (name, p) in t.params().iter() {
                let changed = p.value != before.get(name).unwrap().value;
                if p.group != group {
                    assert!(!changed, "{name} changed during a {group:?} step");
                }
            }
            let moved = t.params().iter().any(|(name, p)| p.group == group && p.value != before.get(name).unwrap().value);
            assert!(moved, "{group:?} step did not move its own parameters");
        }
    }

    #[test]
    fn same_seed_same_history() {
        let (g, m) = toy();
        let mut a = Trainer::new(m.clone(), &g, cfg()).unwrap();
        let mut b = Trainer::new(m, &g, cfg()).unwrap();
        a.train().unwrap();
        b.train().unwrap();
        assert_eq!(a.history(), b.history());
    }

    #[test]
    fn zero_eta_skips_mi_in_omega() {
        let (g, m) = toy();
        let mut t = Trainer::new(m, &g, TrainConfig { eta: 0.0, ..cfg() }).unwrap();
        assert!(t.step_omega().unwrap().is_finite());
    }

    /// Dropout-free `(L_cls, L_cls - eta * L_MI)` at the current parameters.
    fn objectives(t: &mut Trainer) -> (f64, f64) {
        let frozen = t.model().frozen(t.params()).unwrap();
        let r = t.evaluate_iteration(&frozen).unwrap();
        (r.loss_cls, r.loss_omega)
    }

    #[test]
    fn phi_steps_decrease_mi_on_frozen_views() {
        let (g, m) = toy();
        let mut t = Trainer::new(m, &g, cfg()).unwrap();
        // each call reports the loss before its update
        let losses: Vec<f64> = (0..11).map(|_| t.step_phi().unwrap()).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-9, "MI loss rose: {losses:?}");
        }
    }

    #[test]
    fn omega_steps_reduce_structure_objective() {
        let (g, m) = toy_with(ModelConfig { ve_drop: 0.0, ..ModelConfig::default() });
        let mut t = Trainer::new(m, &g, cfg()).unwrap();
        let (_, before) = objectives(&mut t);
        for _ in 0..50 {
            t.step_omega().unwrap();
        }
        let (_, after) = objectives(&mut t);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn theta_steps_reduce_classification_loss() {
        let (g, m) = toy_with(ModelConfig { cls_drop: 0.0, ..ModelConfig::default() });
        let mut t = Trainer::new(m, &g, cfg()).unwrap();
        let (before, _) = objectives(&mut t);
        for _ in 0..50 {
            t.step_theta().unwrap();
        }
        let (after, _) = objectives(&mut t);
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn single_iteration_takes_one_step_per_group() {
        let (g, m) = toy();
        let mut t = Trainer::new(m, &g, TrainConfig { iterations: 1, rho_theta: 1, rho_phi: 1, rho_omega: 1, ..cfg() }).unwrap();
        t.train().unwrap();
        assert_eq!(t.steps(), StepCounts { theta: 1, phi: 1, omega: 1 });
    }

    #[test]
    fn snapshots_skip_warm_up_iterations() {
        let (g, m) = toy();
        let mut t = Trainer::new(m.clone(), &g, TrainConfig { select_after: 2, ..cfg() }).unwrap();
        t.train().unwrap();
        assert!(t.best().unwrap().iteration > 2);
        let mut t = Trainer::new(m, &g, TrainConfig { select_after: 10, ..cfg() }).unwrap();
        t.train().unwrap();
        assert!(t.best().is_none());
        assert_eq!(t.history().len(), 4);
    }
}
