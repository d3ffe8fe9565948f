//! Seeded training runs, parallel execution and mean/σ aggregation.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baseline::train_gcn;
use crate::config::{basic_views, build_model, RunConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Split};
use crate::metrics::{self, Metrics};
use crate::model::Model;
use crate::trainer::{IterationRecord, Trainer};
use crate::views::{ScopeSet, View};

/// Worker count from `COGSL_THREADS`, else the available parallelism.
pub fn threads_from_env() -> usize {
    std::env::var("COGSL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` workers; results keep input order.
pub fn map_ordered<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return items.into_iter().map(f).collect();
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone)]
pub struct CogslRun {
    pub seed: u64,
    pub test: Metrics,
    pub trainer: Trainer,
}

impl CogslRun {
    pub fn history(&self) -> &[IterationRecord] {
        self.trainer.history()
    }
}

/// Trains on prepared views and reports test metrics of the best snapshot.
pub fn fit_cogsl(graph: &Graph, views: [View; 2], scopes: [ScopeSet; 2], cfg: &RunConfig, seed: u64) -> Result<CogslRun> {
    let model = Model::new(graph.features().clone(), graph.n_classes(), views, scopes, cfg.train.model.clone())?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut trainer = Trainer::new(model, graph, tc)?;
    trainer.train()?;
    let test = trainer.evaluate(graph, Split::Test)?;
    Ok(CogslRun { seed, test, trainer })
}

/// Builds the structure graph and basic views from a raw dataset, then trains.
pub fn fit_cogsl_raw(raw: &Graph, cfg: &RunConfig, seed: u64) -> Result<CogslRun> {
    let (graph, model) = build_model(raw, cfg, seed)?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let mut trainer = Trainer::new(model, &graph, tc)?;
    trainer.train()?;
    let test = trainer.evaluate(&graph, Split::Test)?;
    Ok(CogslRun { seed, test, trainer })
}

/// Plain GCN on `view`, test metrics of the best-on-validation epoch.
pub fn fit_baseline(graph: &Graph, view: &View, cfg: &RunConfig, seed: u64) -> Result<Metrics> {
    let run = train_gcn(graph, view, &cfg.baseline, seed)?;
    metrics::evaluate(&run.predictions, &graph.labels_for(Split::Test))
}

/// Plain GCN on the first basic view built from a raw dataset.
pub fn fit_baseline_raw(raw: &Graph, cfg: &RunConfig, seed: u64) -> Result<Metrics> {
    let graph = crate::config::structure_graph(raw, &cfg.view)?;
    let (views, _) = basic_views(&graph, cfg.views, &cfg.view, seed)?;
    fit_baseline(&graph, &views[0], cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    if xs.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub f1_macro: MeanStd,
    pub f1_micro: MeanStd,
    pub auc: MeanStd,
    pub accuracy: MeanStd,
}

pub fn summarize(ms: &[Metrics]) -> Summary {
    let pick = |f: fn(&Metrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
    Summary {
        runs: ms.len(),
        f1_macro: pick(|m| m.f1_macro),
        f1_micro: pick(|m| m.f1_micro),
        auc: pick(|m| m.auc),
        accuracy: pick(|m| m.accuracy),
    }
}

/// Collects per-job results, failing on the first error.
pub fn collect<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    results.into_iter().collect::<std::result::Result<Vec<_>, Error>>()
}
