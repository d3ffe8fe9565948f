//! Random poisoning attacks on edges and features, and the defense driver that
//! retrains on poisoned inputs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{basic_view, structure_graph, RunConfig};
use crate::error::{arg, Result};
use crate::experiment::{self, fit_baseline, fit_cogsl, map_ordered, Summary};
use crate::graph::Graph;
use crate::metrics::Metrics;
use crate::ndiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    EdgeDelete,
    EdgeAdd,
    FeatureNoise,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EdgeDelete => "edge_delete",
            Self::EdgeAdd => "edge_add",
            Self::FeatureNoise => "feature_noise",
        }
    }

    /// Rates used by the standard protocol.
    pub fn standard_rates(self) -> [f64; 3] {
        match self {
            Self::EdgeDelete => [0.05, 0.10, 0.15],
            Self::EdgeAdd => [0.25, 0.50, 0.75],
            Self::FeatureNoise => [0.1, 0.3, 0.5],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "edge_delete" | "delete" => Ok(Self::EdgeDelete),
            "edge_add" | "add" => Ok(Self::EdgeAdd),
            "feature_noise" | "noise" => Ok(Self::FeatureNoise),
            _ => arg(format!("unknown attack {s:?}; expected edge_delete, edge_add or feature_noise")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    View1,
    View2,
    Both,
    Features,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Self::View1 => "view1",
            Self::View2 => "view2",
            Self::Both => "both",
            Self::Features => "features",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub rate: f64,
    pub target: Target,
    pub seed: u64,
    /// Accept rates outside the standard grid.
    #[serde(default)]
    pub allow_any_rate: bool,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.rate.is_finite() || self.rate < 0.0 {
            return arg(format!("attack rate must be a non-negative number, got {}", self.rate));
        }
        if self.kind == AttackKind::EdgeDelete && self.rate >= 1.0 {
            return arg(format!("edge deletion rate must be below 1, got {}", self.rate));
        }
        let standard = self.kind.standard_rates();
        if !self.allow_any_rate && !standard.iter().any(|r| (r - self.rate).abs() < 1e-12) {
            return arg(format!(
                "rate {} is outside the {} domain {:?}; set allow_any_rate to override",
                self.rate,
                self.kind.name(),
                standard
            ));
        }
        let feature_target = self.target == Target::Features;
        if feature_target != (self.kind == AttackKind::FeatureNoise) {
            return arg(format!("{} attacks cannot target {}", self.kind.name(), self.target.name()));
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Indices of the edges of a uniformly shuffled Kruskal spanning forest.
fn random_spanning_forest(graph: &Graph, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..graph.n_edges()).collect();
    order.shuffle(rng);
    let mut parent: Vec<usize> = (0..graph.n_nodes()).collect();
    let mut in_forest = vec![false; graph.n_edges()];
    for e in order {
        let (i, j) = graph.edges()[e];
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
            in_forest[e] = true;
        }
    }
    in_forest
}

/// Removes `floor(rate * |E|)` edges chosen uniformly among those outside a
/// random spanning forest, so every connected component stays connected.
pub fn attack_delete_edges(graph: &Graph, rate: f64, seed: u64) -> Result<Graph> {
    if !(0.0..1.0).contains(&rate) {
        return arg(format!("deletion rate must lie in [0, 1), got {rate}"));
    }
    let m = graph.n_edges();
    let count = (rate * m as f64).floor() as usize;
    if count == 0 {
        return Ok(graph.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_forest = random_spanning_forest(graph, &mut rng);
    let candidates: Vec<usize> = (0..m).filter(|&e| !in_forest[e]).collect();
    if count > candidates.len() {
        let max_rate = candidates.len() as f64 / m as f64;
        return arg(format!(
            "cannot delete {count} edges: only {} lie outside a spanning forest; use a rate of at most {max_rate:.4}",
            candidates.len()
        ));
    }
    let mut drop = vec![false; m];
    for k in rand::seq::index::sample(&mut rng, candidates.len(), count) {
        drop[candidates[k]] = true;
    }
    let kept: Vec<(usize, usize)> = graph.edges().iter().zip(&drop).filter(|(_, &d)| !d).map(|(&e, _)| e).collect();
    graph.with_edges(&kept)
}

/// Adds `floor(rate * |E|)` distinct new undirected non-loop edges, uniformly.
pub fn attack_add_edges(graph: &Graph, rate: f64, seed: u64) -> Result<Graph> {
    if !(rate >= 0.0 && rate.is_finite()) {
        return arg(format!("addition rate must be non-negative, got {rate}"));
    }
    let n = graph.n_nodes();
    let m = graph.n_edges();
    let count = (rate * m as f64).floor() as usize;
    if count == 0 {
        return Ok(graph.clone());
    }
    let total = n * n.saturating_sub(1) / 2;
    let free = total - m;
    if count > free {
        return arg(format!("cannot add {count} edges: only {free} node pairs are unconnected"));
    }
    let existing: HashSet<(usize, usize)> = graph.edges().iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut added: Vec<(usize, usize)> = Vec::with_capacity(count);
    if count * 2 <= free {
        let mut seen = HashSet::with_capacity(count);
        while added.len() < count {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let e = (i.min(j), i.max(j));
            if !existing.contains(&e) && seen.insert(e) {
                added.push(e);
            }
        }
    } else {
        let pool: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|e| !existing.contains(e)).collect();
        for k in rand::seq::index::sample(&mut rng, pool.len(), count) {
            added.push(pool[k]);
        }
    }
    let mut edges = graph.edges().to_vec();
    edges.extend(added);
    graph.with_edges(&edges)
}

/// Mean over nodes of the largest feature value in each row.
pub fn reference_amplitude(x: &Tensor) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let total: f64 = (0..x.rows()).map(|r| x.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
    total / x.rows() as f64
}

/// `X + aleph * r * M` with i.i.d. standard normal `M`.
pub fn attack_features(x: &Tensor, aleph: f64, seed: u64) -> Result<Tensor> {
    if !aleph.is_finite() {
        return arg(format!("noise level must be finite, got {aleph}"));
    }
    if aleph == 0.0 {
        return Ok(x.clone());
    }
    let scale = aleph * reference_amplitude(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

/// Every connected component of `before` is still connected in `after`.
pub fn components_preserved(before: &Graph, after: &Graph) -> bool {
    let n = before.n_nodes();
    let label = |g: &Graph| {
        let mut parent: Vec<usize> = (0..n).collect();
        for &(i, j) in g.edges() {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect::<Vec<_>>()
    };
    let (lb, la) = (label(before), label(after));
    let mut map = BTreeMap::new();
    (0..n).all(|i| *map.entry(lb[i]).or_insert(la[i]) == la[i])
}

/// Structure graph plus the two basic views and scopes after poisoning.
pub fn poisoned_inputs(
    raw: &Graph,
    cfg: &RunConfig,
    spec: Option<&AttackSpec>,
    seed: u64,
) -> Result<(Graph, [crate::views::View; 2], [crate::views::ScopeSet; 2])> {
    let attack_seed = seed.wrapping_add(spec.map_or(0, |s| s.seed));
    let (clean, attacked) = match spec {
        None => {
            let g = structure_graph(raw, &cfg.view)?;
            (g.clone(), g)
        }
        Some(s) if s.kind == AttackKind::FeatureNoise => {
            let noisy = raw.with_features(attack_features(raw.features(), s.rate, attack_seed)?)?;
            let g = structure_graph(&noisy, &cfg.view)?;
            (g.clone(), g)
        }
        Some(s) => {
            let g = structure_graph(raw, &cfg.view)?;
            let a = match s.kind {
                AttackKind::EdgeDelete => attack_delete_edges(&g, s.rate, attack_seed)?,
                _ => attack_add_edges(&g, s.rate, attack_seed)?,
            };
            (g, a)
        }
    };
    let hits = |k: usize| match spec.map(|s| s.target) {
        None | Some(Target::Features) | Some(Target::Both) => true,
        Some(Target::View1) => k == 0,
        Some(Target::View2) => k == 1,
    };
    let pick = |k: usize| if hits(k) { &attacked } else { &clean };
    let (v1, s1) = basic_view(pick(0), cfg.views[0], &cfg.view, seed)?;
    let (v2, s2) = basic_view(pick(1), cfg.views[1], &cfg.view, seed.wrapping_add(1))?;
    Ok((attacked, [v1, v2], [s1, s2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub dataset: String,
    pub attack: String,
    pub rate: f64,
    pub target: String,
    pub model: String,
    pub seed: u64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub auc: f64,
    pub accuracy: f64,
}

/// (attack, rate, target, model).
pub type GroupKey = (String, f64, String, String);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub rows: Vec<DefenseRow>,
}

/// One training job of the defense suite.
#[derive(Debug, Clone)]
struct Job {
    spec: Option<AttackSpec>,
    model: &'static str,
    seed: u64,
}

impl DefenseReport {
    pub const HEADER: &'static str = "dataset,attack,rate,target,model,seed,f1_macro,f1_micro,auc,accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dataset, r.attack, r.rate, r.target, r.model, r.seed, r.f1_macro, r.f1_micro, r.auc, r.accuracy
            )
            .expect("string write");
        }
        s
    }

    /// Mean and σ per (attack, rate, target, model), in first-seen order.
    pub fn summary(&self) -> Vec<(GroupKey, Summary)> {
        let mut groups: Vec<(GroupKey, Vec<Metrics>)> = Vec::new();
        for r in &self.rows {
            let key = (r.attack.clone(), r.rate, r.target.clone(), r.model.clone());
            let m = Metrics { f1_macro: r.f1_macro, f1_micro: r.f1_micro, auc: r.auc, accuracy: r.accuracy };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(m),
                None => groups.push((key, vec![m])),
            }
        }
        groups.into_iter().map(|(k, v)| (k, experiment::summarize(&v))).collect()
    }

    /// Human-readable mean ± σ accuracy table.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("attack        rate   target    model        runs  accuracy\n");
        for ((attack, rate, target, model), sum) in self.summary() {
            writeln!(
                s,
                "{attack:<13} {rate:<6} {target:<9} {model:<12} {:<5} {:.2} ± {:.2}",
                sum.runs,
                100.0 * sum.accuracy.mean,
                100.0 * sum.accuracy.std
            )
            .expect("string write");
        }
        s
    }
}

/// Options of [`run_defense_suite`].
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub dataset: String,
    /// Also train every model on the clean graph.
    pub include_clean: bool,
    pub threads: usize,
}

/// For each attack point, trains the view-targeted CoGSL variants and the
/// plain GCN on poisoned inputs over `cfg.seeds`.
///
/// Edge attacks train `cogsl-v1`, `cogsl-v2`, `cogsl-all` and `gcn`; feature
/// noise trains `cogsl-all` and `gcn`. The GCN always uses the first basic
/// view, built from the graph with every requested perturbation applied.
pub fn run_defense_suite(raw: &Graph, grid: &[AttackSpec], cfg: &RunConfig, opts: &SuiteOptions) -> Result<DefenseReport> {
    for s in grid {
        s.validate()?;
    }
    let mut jobs = Vec::new();
    let mut points: Vec<Option<AttackSpec>> = Vec::new();
    if opts.include_clean && !grid.is_empty() {
        points.push(None);
    }
    points.extend(grid.iter().copied().map(Some));
    for p in points {
        let variants: Vec<(Option<AttackSpec>, &'static str)> = match p {
            Some(s) if s.kind != AttackKind::FeatureNoise => vec![
                (Some(AttackSpec { target: Target::View1, ..s }), "cogsl-v1"),
                (Some(AttackSpec { target: Target::View2, ..s }), "cogsl-v2"),
                (Some(AttackSpec { target: Target::Both, ..s }), "cogsl-all"),
                (Some(AttackSpec { target: Target::Both, ..s }), "gcn"),
            ],
            other => vec![(other, "cogsl-all"), (other, "gcn")],
        };
        for (spec, model) in variants {
            for &seed in &cfg.seeds {
                jobs.push(Job { spec, model, seed });
            }
        }
    }
    let results = map_ordered(jobs.clone(), opts.threads, |job| -> Result<Metrics> {
        let (graph, views, scopes) = poisoned_inputs(raw, cfg, job.spec.as_ref(), job.seed)?;
        if job.model == "gcn" {
            fit_baseline(&graph, &views[0], cfg, job.seed)
        } else {
            Ok(fit_cogsl(&graph, views, scopes, cfg, job.seed)?.test)
        }
    });
    let metrics = experiment::collect(results)?;
    let rows = jobs
        .iter()
        .zip(metrics)
        .map(|(job, m)| DefenseRow {
            dataset: opts.dataset.clone(),
            attack: job.spec.map_or("none", |s| s.kind.name()).to_string(),
            rate: job.spec.map_or(0.0, |s| s.rate),
            target: job.spec.map_or("none", |s| s.target.name()).to_string(),
            model: job.model.to_string(),
            seed: job.seed,
            f1_macro: m.f1_macro,
            f1_micro: m.f1_micro,
            auc: m.auc,
            accuracy: m.accuracy,
        })
        .collect();
    Ok(DefenseReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Splits;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        let labels = (0..n).map(|i| i % 2).collect();
        Graph::new(Tensor::zeros(n, 1), labels, edges, Splits { train: vec![0, 1], ..Default::default() }).unwrap()
    }

    #[test]
    fn triangle_loses_exactly_one_edge() {
        let g = graph(3, &[(0, 1), (1, 2), (0, 2)]);
        let mut outcomes = HashSet::new();
        for seed in 0..50 {
            let a = attack_delete_edges(&g, 1.0 / 3.0 + 1e-12, seed).unwrap();
            assert_eq!(a.n_edges(), 2);
            assert!(components_preserved(&g, &a));
            outcomes.insert(a.edges().to_vec());
        }
        assert_eq!(outcomes.len(), 3);
    }

    #[test]
    fn zero_rates_are_identity() {
        let g = graph(4, &[(0, 1), (2, 3)]);
        assert_eq!(attack_delete_edges(&g, 0.0, 1).unwrap(), g);
        assert_eq!(attack_add_edges(&g, 0.0, 1).unwrap(), g);
        let x = Tensor::full(3, 2, 1.0);
        assert_eq!(attack_features(&x, 0.0, 1).unwrap(), x);
    }

    #[test]
    fn tree_cannot_lose_edges() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let err = attack_delete_edges(&g, 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("rate of at most"), "{err}");
    }

    #[test]
    fn dense_addition_enumerates() {
        let g = graph(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]);
        let a = attack_add_edges(&g, 1.5, 3).unwrap();
        assert_eq!(a.n_edges(), 4 + 6);
        assert!(attack_add_edges(&g, 2.0, 3).is_err());
    }

    #[test]
    fn rate_domain_enforced() {
        let s = AttackSpec { kind: AttackKind::EdgeDelete, rate: 0.2, target: Target::Both, seed: 0, allow_any_rate: false };
        assert!(s.validate().is_err());
        assert!(AttackSpec { allow_any_rate: true, ..s }.validate().is_ok());
        assert!(AttackSpec { target: Target::Features, rate: 0.05, ..s }.validate().is_err());
    }
}
