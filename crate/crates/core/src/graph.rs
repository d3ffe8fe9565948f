//! Node-classification datasets: features, labels, undirected edges and splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitReport {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// `class_histogram[split][class]`, splits in train/val/test order.
    pub class_histogram: [Vec<usize>; 3],
}

/// An undirected, attributed graph with a semi-supervised split.
///
/// Edges are stored once per undirected pair as `(i, j)` with `i < j`, sorted.
/// Labels outside the train split are only reachable through
/// [`Graph::labels_for`], so training code asks for train targets explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    edges: Vec<(usize, usize)>,
    splits: Splits,
}

impl Graph {
    /// Symmetrizes `edges`, drops self-loops and duplicates, then validates.
    pub fn new(features: Tensor, labels: Vec<usize>, edges: &[(usize, usize)], splits: Splits) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for {n} feature rows", labels.len())));
        }
        for (row, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::Validation(format!("edge row {row}: ({i}, {j}) out of range for {n} nodes")));
            }
        }
        let (edges, self_loops, duplicates) = canonical_edges(edges);
        if self_loops > 0 || duplicates > 0 {
            log::info!("dropped {self_loops} self-loops and {duplicates} duplicate edges");
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let g = Self { features, labels, n_classes, edges, splits };
        g.validate()?;
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// `(node, label)` pairs of one split.
    pub fn labels_for(&self, split: Split) -> Vec<(usize, usize)> {
        self.splits.get(split).iter().map(|&i| (i, self.labels[i])).collect()
    }

    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::new(self.features.clone(), self.labels.clone(), edges, self.splits.clone())
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::Shape(format!("features {:?} vs {:?}", features.shape(), self.features.shape())));
        }
        Ok(Self { features, ..self.clone() })
    }

    /// Copy with each feature row scaled to unit L1 norm (zero rows unchanged).
    pub fn row_normalized(&self) -> Self {
        let mut f = self.features.clone();
        for r in 0..f.rows() {
            let row = f.row_mut(r);
            let s: f64 = row.iter().map(|x| x.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        Self { features: f, ..self.clone() }
    }

    /// Checks every invariant and returns per-split class histograms.
    pub fn validate(&self) -> Result<SplitReport> {
        let n = self.n_nodes();
        for &(i, j) in &self.edges {
            if i >= n || j >= n || i == j {
                return Err(Error::Validation(format!("invalid stored edge ({i}, {j})")));
            }
        }
        let present: BTreeSet<usize> = self.labels.iter().copied().collect();
        if let Some(missing) = (0..self.n_classes).find(|c| !present.contains(c)) {
            return Err(Error::Validation(format!(
                "labels are not contiguous: class {missing} missing below max label {}",
                self.n_classes - 1
            )));
        }
        let mut owner: BTreeMap<usize, &str> = BTreeMap::new();
        for (name, idx) in [("train", &self.splits.train), ("val", &self.splits.val), ("test", &self.splits.test)] {
            for &i in idx.iter() {
                if i >= n {
                    return Err(Error::Validation(format!("{name} index {i} out of range for {n} nodes")));
                }
                if let Some(prev) = owner.insert(i, name) {
                    if prev == name {
                        return Err(Error::Validation(format!("index {i} repeated in {name}")));
                    }
                    return Err(Error::Validation(format!("index {i} in {prev} and {name}")));
                }
            }
        }
        if self.splits.train.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let hist = |idx: &[usize]| {
            let mut h = vec![0; self.n_classes];
            for &i in idx {
                h[self.labels[i]] += 1;
            }
            h
        };
        Ok(SplitReport {
            train: self.splits.train.len(),
            val: self.splits.val.len(),
            test: self.splits.test.len(),
            class_histogram: [hist(&self.splits.train), hist(&self.splits.val), hist(&self.splits.test)],
        })
    }

    /// Writes the four dataset files. Features use shortest round-trip formatting.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut s = String::new();
        for r in 0..self.n_nodes() {
            let row: Vec<String> = self.features.row(r).iter().map(|x| format!("{x}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        fs::write(dir.join("features.csv"), s)?;
        let labels: String = self.labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(dir.join("labels.csv"), labels)?;
        let mut e = String::new();
        for &(i, j) in &self.edges {
            writeln!(e, "{i},{j}").expect("string write");
        }
        fs::write(dir.join("edges.csv"), e)?;
        fs::write(dir.join("splits.json"), serde_json::to_string(&self.splits)?)?;
        Ok(())
    }
}

fn canonical_edges(edges: &[(usize, usize)]) -> (Vec<(usize, usize)>, usize, usize) {
    let mut self_loops = 0;
    let mut set = BTreeSet::new();
    let mut kept = 0;
    for &(i, j) in edges {
        if i == j {
            self_loops += 1;
            continue;
        }
        kept += 1;
        set.insert((i.min(j), i.max(j)));
    }
    let dups = kept - set.len();
    (set.into_iter().collect(), self_loops, dups)
}

fn read(path: PathBuf) -> Result<(PathBuf, String)> {
    match fs::read_to_string(&path) {
        Ok(s) => Ok((path, s)),
        Err(e) => Err(Error::Load { path, reason: e.to_string() }),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Load { path: path.to_path_buf(), reason: format!("line {}: {msg}", line + 1) }
}

/// Loads `features.csv`, `labels.csv`, `edges.csv` and `splits.json` from `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Graph> {
    let dir = dir.as_ref();
    let (fp, ftext) = read(dir.join("features.csv"))?;
    let (lp, ltext) = read(dir.join("labels.csv"))?;
    let (ep, etext) = read(dir.join("edges.csv"))?;
    let (sp, stext) = read(dir.join("splits.json"))?;

    let mut rows = Vec::new();
    for (ln, line) in ftext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| parse_err(&fp, ln, e))?);
    }
    let features = Tensor::from_rows(&rows).map_err(|e| Error::Load { path: fp.clone(), reason: e.to_string() })?;

    let mut labels = Vec::new();
    for (ln, line) in ltext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        labels.push(line.trim().parse::<usize>().map_err(|e| parse_err(&lp, ln, e))?);
    }

    let mut edges = Vec::new();
    for (ln, line) in etext.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',').map(|t| t.trim().parse::<usize>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
            _ => return Err(parse_err(&ep, ln, format!("expected \"i,j\", got {line:?}"))),
        }
    }
    if edges.is_empty() {
        log::info!("{} has no edges", ep.display());
    }

    let splits: Splits = serde_json::from_str(&stext).map_err(|e| Error::Load { path: sp, reason: e.to_string() })?;
    Graph::new(features, labels, &edges, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(edges: &[(usize, usize)], splits: Splits) -> Result<Graph> {
        Graph::new(Tensor::zeros(4, 2), vec![0, 1, 0, 1], edges, splits)
    }

    fn splits(train: &[usize], val: &[usize], test: &[usize]) -> Splits {
        Splits { train: train.to_vec(), val: val.to_vec(), test: test.to_vec() }
    }

    #[test]
    fn self_loops_and_duplicates_dropped() {
        let g = tiny(&[(0, 1), (1, 0), (2, 2), (3, 2)], splits(&[0], &[], &[])).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (2, 3)]);
        assert_eq!(g.n_nodes(), 4);
    }

    #[test]
    fn overlap_reported_with_index() {
        let err = tiny(&[], splits(&[0, 1], &[1, 2], &[])).unwrap_err();
        assert!(err.to_string().contains("index 1 in train and val"), "{err}");
    }

    #[test]
    fn single_node_report() {
        let g = Graph::new(Tensor::zeros(1, 1), vec![0], &[], splits(&[0], &[], &[])).unwrap();
        let r = g.validate().unwrap();
        assert_eq!((r.train, r.val, r.test), (1, 0, 0));
    }

    #[test]
    fn non_contiguous_labels_rejected() {
        let err = Graph::new(Tensor::zeros(2, 1), vec![0, 2], &[], splits(&[0], &[], &[])).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn out_of_range_edge_names_row() {
        let err = tiny(&[(0, 1), (0, 9)], splits(&[0], &[], &[])).unwrap_err();
        assert!(err.to_string().contains("edge row 1"), "{err}");
    }

    #[test]
    fn empty_train_rejected() {
        assert!(tiny(&[], splits(&[], &[0], &[])).is_err());
    }

    #[test]
    fn split_accessor_filters_labels() {
        let g = tiny(&[], splits(&[1], &[0], &[2, 3])).unwrap();
        assert_eq!(g.labels_for(Split::Train), vec![(1, 1)]);
        assert_eq!(g.labels_for(Split::Test), vec![(2, 0), (3, 1)]);
    }
}
