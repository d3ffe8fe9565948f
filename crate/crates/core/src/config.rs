//! Run configuration, per-dataset presets, and construction of the two basic
//! views and their scopes from a graph.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::BaselineConfig;
use crate::error::{arg, Error, Result};
use crate::graph::{load_dataset, Graph};
use crate::model::Model;
use crate::trainer::TrainConfig;
use crate::views::{
    adjacency_view, knn_edges, knn_view, ppr_diffusion_top_h, scope_khop, scope_toph, subgraph_view, PprMode, ScopeSet, View,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BasicView {
    #[serde(rename = "A")]
    Adjacency,
    #[serde(rename = "S")]
    Diffusion,
    #[serde(rename = "K")]
    Knn,
    #[serde(rename = "A_sub")]
    Subgraph,
}

impl BasicView {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Self::Adjacency),
            "S" => Ok(Self::Diffusion),
            "K" => Ok(Self::Knn),
            "A_sub" => Ok(Self::Subgraph),
            _ => arg(format!("unknown view {s:?}; expected A, S, K or A_sub")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Adjacency => "A",
            Self::Diffusion => "S",
            Self::Knn => "K",
            Self::Subgraph => "A_sub",
        }
    }
}

/// How the structure used by adjacency-derived views is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitGraph {
    /// Use the given edges, or a feature KNN graph when there are none.
    Auto,
    Given,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSettings {
    pub init_graph: InitGraph,
    /// Neighbours per node of the initial feature graph.
    pub init_knn_k: usize,
    /// Neighbours per node of the KNN basic view.
    pub knn_k: usize,
    pub alpha: f64,
    /// `None` picks the closed form up to 2000 nodes, power iteration above.
    pub ppr_mode: Option<PprMode>,
    pub ppr_tol: f64,
    /// Diffusion rows are sparsified to this many entries, which also sets the top-h scope.
    pub top_h: usize,
    pub khop: usize,
    pub subgraph_keep: f64,
    pub row_normalize: bool,
}

impl Default for ViewSettings {
    fn default() -> Self {
        Self {
            init_graph: InitGraph::Auto,
            init_knn_k: 9,
            knn_k: 9,
            alpha: 0.15,
            ppr_mode: None,
            ppr_tol: 1e-10,
            top_h: 100,
            khop: 1,
            subgraph_keep: 0.7,
            row_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub preset: Option<String>,
    pub views: [BasicView; 2],
    pub view: ViewSettings,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            preset: None,
            views: [BasicView::Adjacency, BasicView::Diffusion],
            view: ViewSettings::default(),
            train: TrainConfig::default(),
            baseline: BaselineConfig::default(),
            seeds: (0..10).collect(),
            output: None,
        }
    }
}

pub const PRESETS: [&str; 5] = ["wine", "cancer", "digits", "polblogs", "citeseer"];

/// Defaults for a known dataset name.
pub fn preset(name: &str) -> Option<RunConfig> {
    use BasicView::*;
    let mut c = RunConfig { preset: Some(name.to_string()), ..RunConfig::default() };
    let t = &mut c.train;
    // (views, ve_lr, ve_drop, T, rho_theta, rho_phi, rho_omega, lambda)
    let (views, lr, drop, iters, rt, rp, ro, lambda) = match name {
        "wine" => ([Diffusion, Knn], 0.001, 0.8, 100, 1, 5, 1, 0.5),
        "cancer" => ([Diffusion, Knn], 0.1, 0.5, 150, 1, 5, 1, 0.9),
        "digits" => ([Adjacency, Diffusion], 0.01, 0.5, 200, 10, 10, 1, 0.5),
        "polblogs" => ([Adjacency, Diffusion], 0.1, 0.8, 150, 5, 5, 1, 0.1),
        "citeseer" => ([Adjacency, Diffusion], 0.001, 0.2, 200, 5, 10, 5, 0.5),
        _ => return None,
    };
    c.views = views;
    t.lr_omega = lr;
    t.model.ve_drop = drop;
    t.iterations = iters;
    t.rho_theta = rt;
    t.rho_phi = rp;
    t.rho_omega = ro;
    t.model.fusion.epsilon = 0.1;
    t.model.fusion.lambda = lambda;
    t.batch_size = None;
    match name {
        "citeseer" => {
            c.view.top_h = 40;
            c.view.khop = 2;
            c.view.row_normalize = true;
        }
        "digits" => {
            c.view.top_h = 100;
            c.view.khop = 1;
        }
        // Slower classifiers with heavier dropout, and no snapshots from the
        // first, barely trained iterations.
        "wine" => {
            c.train.lr_theta = 0.002;
            c.train.model.cls_drop = 0.7;
            c.train.select_after = 10;
        }
        "cancer" => {
            c.train.lr_theta = 0.005;
            c.train.lr_omega = 0.001;
            c.train.model.cls_drop = 0.7;
            c.train.select_after = 10;
        }
        _ => {}
    }
    Some(c)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Parses a JSON config. Keys override the preset named by `"preset"`, or
    /// else the preset matching the dataset directory name, or plain defaults.
    /// A relative dataset path is resolved against the config file's directory
    /// when it does not exist relative to the working directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
        if cfg.dataset.is_relative() && !cfg.dataset.exists() {
            if let Some(parent) = path.parent() {
                let alt = parent.join(&cfg.dataset);
                if alt.exists() {
                    cfg.dataset = alt;
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        let name = over.get("preset").and_then(Value::as_str).map(str::to_string).or_else(|| {
            let ds = over.get("dataset")?.as_str()?;
            Path::new(ds).file_name()?.to_str().map(str::to_lowercase)
        });
        let base = match name.as_deref() {
            Some(n) => match preset(n) {
                Some(p) => p,
                None if over.get("preset").is_some() => return arg(format!("unknown preset {n:?}")),
                None => RunConfig::default(),
            },
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        merge(&mut value, over);
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides with dotted keys, e.g. `train.eta=0.5`.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("checked"),
                    Value::Array(a) => match part.parse::<usize>().ok().and_then(|i| a.get_mut(i)) {
                        Some(s) => s,
                        None => return arg(format!("unknown config key {key:?}")),
                    },
                    _ => return arg(format!("unknown config key {key:?}")),
                };
            }
            *slot = parsed;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Argument(format!("bad override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let v = &self.view;
        if !(v.alpha > 0.0 && v.alpha <= 1.0) {
            return arg(format!("alpha must lie in (0, 1], got {}", v.alpha));
        }
        if !(0.0..=1.0).contains(&v.subgraph_keep) {
            return arg(format!("subgraph_keep must lie in [0, 1], got {}", v.subgraph_keep));
        }
        if v.top_h == 0 || v.khop == 0 || v.knn_k == 0 || v.init_knn_k == 0 {
            return arg("top_h, khop, knn_k and init_knn_k must be positive");
        }
        if self.seeds.is_empty() {
            return arg("at least one seed is required");
        }
        Ok(())
    }

    pub fn load_graph(&self) -> Result<Graph> {
        let g = load_dataset(&self.dataset)?;
        Ok(if self.view.row_normalize { g.row_normalized() } else { g })
    }
}

/// Returns the graph whose edges feed the adjacency-derived views.
pub fn structure_graph(graph: &Graph, settings: &ViewSettings) -> Result<Graph> {
    let use_knn = match settings.init_graph {
        InitGraph::Given => false,
        InitGraph::Knn => true,
        InitGraph::Auto => graph.n_edges() == 0,
    };
    if use_knn {
        graph.with_edges(&knn_edges(graph.features(), settings.init_knn_k)?)
    } else {
        Ok(graph.clone())
    }
}

/// Builds one basic view and its re-estimation scope from a structure graph.
pub fn basic_view(graph: &Graph, which: BasicView, settings: &ViewSettings, seed: u64) -> Result<(View, ScopeSet)> {
    let n = graph.n_nodes();
    let view = match which {
        BasicView::Adjacency => adjacency_view(graph, false)?,
        BasicView::Diffusion => {
            let mode = settings.ppr_mode.unwrap_or(if n <= 2000 { PprMode::ClosedForm } else { PprMode::PowerIteration });
            ppr_diffusion_top_h(graph, settings.alpha, mode, settings.ppr_tol, settings.top_h.min(n))?
        }
        BasicView::Knn => knn_view(graph.features(), settings.knn_k.min(n.saturating_sub(1)).max(1))?,
        BasicView::Subgraph => {
            let keep = (settings.subgraph_keep * graph.n_edges() as f64).floor() as usize;
            subgraph_view(graph, keep, seed)?
        }
    };
    let scope = match which {
        BasicView::Diffusion => scope_toph(&view, settings.top_h.min(n))?,
        _ => scope_khop(&view, settings.khop)?,
    };
    Ok((view, scope))
}

/// Both basic views and scopes for `graph`, which must already carry its structure.
pub fn basic_views(graph: &Graph, views: [BasicView; 2], settings: &ViewSettings, seed: u64) -> Result<([View; 2], [ScopeSet; 2])> {
    let (v1, s1) = basic_view(graph, views[0], settings, seed)?;
    let (v2, s2) = basic_view(graph, views[1], settings, seed.wrapping_add(1))?;
    Ok(([v1, v2], [s1, s2]))
}

/// Assembles the model for one seed from a raw dataset graph.
pub fn build_model(graph: &Graph, cfg: &RunConfig, seed: u64) -> Result<(Graph, Model)> {
    let g = structure_graph(graph, &cfg.view)?;
    let (views, scopes) = basic_views(&g, cfg.views, &cfg.view, seed)?;
    let model = Model::new(g.features().clone(), g.n_classes(), views, scopes, cfg.train.model.clone())?;
    Ok((g, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_fills_table_values() {
        let c = RunConfig::from_json(r#"{"dataset": "data/cancer"}"#).unwrap();
        assert_eq!(c.views, [BasicView::Diffusion, BasicView::Knn]);
        assert_eq!(c.train.iterations, 150);
        assert_eq!(c.train.lr_omega, 0.001);
        assert_eq!(c.train.select_after, 10);
        assert_eq!(c.train.model.fusion.lambda, 0.9);
    }

    #[test]
    fn file_keys_override_preset() {
        let c = RunConfig::from_json(r#"{"dataset": "x/wine", "train": {"eta": 0.7, "model": {"tau": 0.2}}}"#).unwrap();
        assert_eq!(c.train.eta, 0.7);
        assert_eq!(c.train.model.tau, 0.2);
        assert_eq!(c.train.model.ve_drop, 0.8);
    }

    #[test]
    fn dotted_overrides() {
        let c = preset("wine").unwrap();
        let c = c.with_overrides(&[("train.eta".into(), "0.3".into()), ("views.1".into(), "\"A\"".into())]).unwrap();
        assert_eq!(c.train.eta, 0.3);
        assert_eq!(c.views[1], BasicView::Adjacency);
        assert!(c.with_overrides(&[("train.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(RunConfig::from_json(r#"{"preset": "nope"}"#).is_err());
    }

    #[test]
    fn mu_of_one_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"model": {"mu": [1.0, 0.5]}}}"#).is_err());
    }
}
