use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cogsl::config::RunConfig;
use cogsl::experiment::{fit_baseline_raw, fit_cogsl_raw};
use cogsl::graph::{Graph, Split};
use cogsl::metrics::Metrics;
use cogsl::ndiff::{Tape, Tensor};
use cogsl::views::PprMode;
use cogsl::{robustness, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        Error::Argument(_) | Error::Validation(_) | Error::Shape(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn nested(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// A node-labelled graph with train/val/test splits.
#[pyclass(name = "Graph", module = "pycogsl", frozen)]
#[derive(Clone)]
struct PyGraph {
    inner: Graph,
}

#[pymethods]
impl PyGraph {
    /// Loads `features.csv`, `labels.csv`, `edges.csv` and `splits.json` from a directory.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: cogsl::graph::load_dataset(path).map_err(to_py)? })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.n_edges()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        nested(self.inner.features())
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    fn labels(&self, split: &str) -> PyResult<Vec<(usize, usize)>> {
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        Ok(self.inner.labels_for(split))
    }

    fn with_edges(&self, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_edges(&edges).map_err(to_py)? })
    }

    fn with_features(&self, features: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_features(tensor(features)?).map_err(to_py)? })
    }

    fn __repr__(&self) -> String {
        format!("Graph(n_nodes={}, n_edges={}, n_classes={})", self.inner.n_nodes(), self.inner.n_edges(), self.inner.n_classes())
    }
}

/// Run configuration: dataset, views, training and baseline settings.
#[pyclass(name = "Config", module = "pycogsl")]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(path).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_json(text).map_err(to_py)? })
    }

    /// New config with dotted-key overrides, e.g. `{"train.eta": 0.5}`.
    fn with_overrides(&self, overrides: &Bound<'_, PyDict>) -> PyResult<Self> {
        let json = overrides.py().import("json")?;
        let mut pairs = Vec::new();
        for (k, v) in overrides.iter() {
            let value: String = json.call_method1("dumps", (v,))?.extract()?;
            pairs.push((k.extract::<String>()?, value));
        }
        Ok(Self { inner: self.inner.with_overrides(&pairs).map_err(to_py)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn load_graph(&self) -> PyResult<PyGraph> {
        Ok(PyGraph { inner: self.inner.load_graph().map_err(to_py)? })
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("f1_macro", m.f1_macro)?;
    d.set_item("f1_micro", m.f1_micro)?;
    d.set_item("auc", m.auc)?;
    d.set_item("accuracy", m.accuracy)?;
    Ok(d)
}

/// Trains one seed and returns test metrics, the best iteration and the
/// per-iteration history.
#[pyfunction]
#[pyo3(signature = (config, graph, seed=0))]
fn train<'py>(py: Python<'py>, config: &PyConfig, graph: &PyGraph, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let (cfg, raw) = (config.inner.clone(), graph.inner.clone());
    let run = py.allow_threads(|| fit_cogsl_raw(&raw, &cfg, seed)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("seed", seed)?;
    out.set_item("test", metrics_dict(py, &run.test)?)?;
    out.set_item("best_iteration", run.trainer.best().map(|b| b.iteration))?;
    let history = serde_json::to_string(run.history()).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    out.set_item("history", py.import("json")?.call_method1("loads", (history,))?)?;
    Ok(out)
}

/// Plain two-layer GCN on the first basic view; returns test metrics.
#[pyfunction]
#[pyo3(signature = (config, graph, seed=0))]
fn train_baseline<'py>(py: Python<'py>, config: &PyConfig, graph: &PyGraph, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let (cfg, raw) = (config.inner.clone(), graph.inner.clone());
    let m = py.allow_threads(|| fit_baseline_raw(&raw, &cfg, seed)).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Metrics of class distributions `probs` against `(node, label)` targets.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, probs: Vec<Vec<f64>>, targets: Vec<(usize, usize)>) -> PyResult<Bound<'py, PyDict>> {
    let m = cogsl::metrics::evaluate(&tensor(probs)?, &targets).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Dense personalized-PageRank diffusion of the graph's structure.
#[pyfunction]
#[pyo3(signature = (graph, alpha=0.15, power_iteration=false, tol=1e-10))]
fn ppr(graph: &PyGraph, alpha: f64, power_iteration: bool, tol: f64) -> PyResult<Vec<Vec<f64>>> {
    let mode = if power_iteration { PprMode::PowerIteration } else { PprMode::ClosedForm };
    Ok(nested(&cogsl::views::ppr_dense(&graph.inner, alpha, mode, tol).map_err(to_py)?))
}

/// Undirected cosine KNN pairs `(i, j)` with `i < j`.
#[pyfunction]
fn knn_edges(features: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<(usize, usize)>> {
    cogsl::views::knn_edges(&tensor(features)?, k).map_err(to_py)
}

/// Symmetric cross-view InfoNCE over all rows of `a` and `b`.
#[pyfunction]
#[pyo3(signature = (a, b, tau=0.5))]
fn infonce(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let (a, b) = (tensor(a)?, tensor(b)?);
    let batch = Arc::new((0..a.rows()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let l = tape.infonce(va, vb, batch, tau).map_err(to_py)?;
    Ok(tape.value(l).item())
}

#[pyfunction]
fn delete_edges(graph: &PyGraph, rate: f64, seed: u64) -> PyResult<PyGraph> {
    Ok(PyGraph { inner: robustness::attack_delete_edges(&graph.inner, rate, seed).map_err(to_py)? })
}

#[pyfunction]
fn add_edges(graph: &PyGraph, rate: f64, seed: u64) -> PyResult<PyGraph> {
    Ok(PyGraph { inner: robustness::attack_add_edges(&graph.inner, rate, seed).map_err(to_py)? })
}

#[pyfunction]
fn feature_noise(graph: &PyGraph, aleph: f64, seed: u64) -> PyResult<PyGraph> {
    let x = robustness::attack_features(graph.inner.features(), aleph, seed).map_err(to_py)?;
    Ok(PyGraph { inner: graph.inner.with_features(x).map_err(to_py)? })
}

/// Runs the finite-difference suite; returns `(passed, report)`.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> PyResult<(bool, String)> {
    let report = py.allow_threads(|| cogsl::gradcheck::run_suite(1.0)).map_err(to_py)?;
    Ok((report.passed(), report.render()))
}

#[pymodule]
fn pycogsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ppr, m)?)?;
    m.add_function(wrap_pyfunction!(knn_edges, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(delete_edges, m)?)?;
    m.add_function(wrap_pyfunction!(add_edges, m)?)?;
    m.add_function(wrap_pyfunction!(feature_noise, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
