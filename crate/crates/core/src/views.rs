//! Basic structure views (adjacency, PPR diffusion, KNN, subgraph) and the
//! per-node candidate scopes used for re-estimation.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::graph::Graph;
use crate::ndiff::Tensor;
use crate::sparse::Pattern;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Adjacency,
    Diffusion,
    Knn,
    Subgraph,
    Estimated,
    Fused,
}

impl ViewKind {
    pub fn requires_symmetry(self) -> bool {
        matches!(self, ViewKind::Adjacency | ViewKind::Knn | ViewKind::Subgraph)
    }
}

/// Nonnegative row-sparse `N x N` structure.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pattern: Arc<Pattern>,
    weights: Vec<f64>,
    kind: ViewKind,
}

impl View {
    pub fn new(pattern: Arc<Pattern>, weights: Vec<f64>, kind: ViewKind) -> Result<Self> {
        if pattern.n_rows() != pattern.n_cols() {
            return Err(Error::Validation(format!("view must be square, got {}x{}", pattern.n_rows(), pattern.n_cols())));
        }
        if weights.len() != pattern.nnz() {
            return Err(Error::Validation(format!("{} weights for {} stored entries", weights.len(), pattern.nnz())));
        }
        if let Some(k) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
            let (i, j) = pattern.coords().nth(k).expect("k < nnz");
            return Err(Error::Validation(format!("view entry ({i}, {j}) = {} is not a finite nonnegative", weights[k])));
        }
        if kind.requires_symmetry() && !pattern.is_symmetric() {
            return Err(Error::Validation(format!("{kind:?} view must have symmetric support")));
        }
        Ok(Self { pattern, weights, kind })
    }

    /// Unit-weight view from undirected pairs, each stored in both directions.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)], kind: ViewKind, self_loops: bool) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return arg(format!("edge ({i}, {j}) out of range for {n} nodes"));
            }
            rows[i].push(j);
            rows[j].push(i);
        }
        if self_loops {
            for (i, r) in rows.iter_mut().enumerate() {
                r.push(i);
            }
        }
        let pattern = Pattern::from_rows(n, rows)?;
        let weights = vec![1.0; pattern.nnz()];
        Self::new(Arc::new(pattern), weights, kind)
    }

    pub fn from_dense(dense: &Tensor, kind: ViewKind) -> Result<Self> {
        let n = dense.rows();
        let mut rows = Vec::with_capacity(n);
        let mut weights = Vec::new();
        for i in 0..n {
            let mut cols = Vec::new();
            for (j, &w) in dense.row(i).iter().enumerate() {
                if w != 0.0 {
                    cols.push(j);
                    weights.push(w);
                }
            }
            rows.push(cols);
        }
        Self::new(Arc::new(Pattern::from_rows(dense.cols(), rows)?), weights, kind)
    }

    pub fn n(&self) -> usize {
        self.pattern.n_rows()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |k| self.weights[k])
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.weights[self.pattern.row_range(i)].iter().sum()
    }

    pub fn to_dense(&self) -> Tensor {
        let n = self.n();
        let mut t = Tensor::zeros(n, n);
        for (k, (i, j)) in self.pattern.coords().enumerate() {
            t.set(i, j, self.weights[k]);
        }
        t
    }

    pub fn is_symmetric_weights(&self) -> bool {
        self.pattern.coords().zip(&self.weights).all(|((i, j), &w)| self.get(j, i) == w)
    }

    /// Keeps the `h` largest entries of each row (ties to the smaller column).
    pub fn top_h_per_row(&self, h: usize) -> Result<View> {
        if h == 0 {
            return arg("h must be positive");
        }
        let mut rows = Vec::with_capacity(self.n());
        let mut keep: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..self.n() {
            let mut entries: Vec<(usize, f64)> =
                self.pattern.row_range(i).map(|k| (self.pattern.col_idx()[k], self.weights[k])).filter(|&(_, w)| w > 0.0).collect();
            entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            entries.truncate(h);
            entries.sort_by_key(|e| e.0);
            rows.push(entries.iter().map(|e| e.0).collect::<Vec<_>>());
            keep.extend(entries.into_iter().map(|(j, w)| (i, j, w)));
        }
        let pattern = Pattern::from_rows(self.n(), rows)?;
        let weights = keep.into_iter().map(|e| e.2).collect();
        View::new(Arc::new(pattern), weights, self.kind)
    }

    /// Text form: header `N nnz`, then one `i j w` line per stored entry.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 * self.nnz() + 16);
        writeln!(s, "{} {}", self.n(), self.nnz()).expect("string write");
        for (k, (i, j)) in self.pattern.coords().enumerate() {
            writeln!(s, "{i} {j} {}", self.weights[k]).expect("string write");
        }
        s
    }

    pub fn from_text(text: &str, kind: ViewKind) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Validation("empty view file".into()))?;
        let mut h = header.split_whitespace().map(str::parse::<usize>);
        let (n, nnz) = match (h.next(), h.next()) {
            (Some(Ok(n)), Some(Ok(z))) => (n, z),
            _ => return Err(Error::Validation(format!("bad view header {header:?}"))),
        };
        let mut entries = Vec::with_capacity(nnz);
        for (ln, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [i, j, w] => i.parse::<usize>().ok().zip(j.parse::<usize>().ok()).zip(w.parse::<f64>().ok()),
                _ => None,
            };
            let ((i, j), w) = parsed.ok_or_else(|| Error::Validation(format!("bad view entry on line {}: {line:?}", ln + 2)))?;
            entries.push((i, j, w));
        }
        if entries.len() != nnz {
            return Err(Error::Validation(format!("header says {nnz} entries, found {}", entries.len())));
        }
        entries.sort_by_key(|e| (e.0, e.1));
        let coords: Vec<(usize, usize)> = entries.iter().map(|e| (e.0, e.1)).collect();
        let pattern = Pattern::from_coords(n, n, &coords)?;
        if pattern.nnz() != nnz {
            return Err(Error::Validation("duplicate entries in view file".into()));
        }
        View::new(Arc::new(pattern), entries.into_iter().map(|e| e.2).collect(), kind)
    }
}

/// 0/1 adjacency view, optionally with unit diagonal.
pub fn adjacency_view(graph: &Graph, add_self_loops: bool) -> Result<View> {
    View::from_undirected(graph.n_nodes(), graph.edges(), ViewKind::Adjacency, add_self_loops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PprMode {
    ClosedForm,
    PowerIteration,
}

/// Symmetrically normalized adjacency with self-loops, as a dense matrix.
fn normalized_adjacency(graph: &Graph) -> Result<View> {
    let a = adjacency_view(graph, true)?;
    let n = a.n();
    let deg: Vec<f64> = (0..n).map(|i| a.row_sum(i)).collect();
    let pattern = a.pattern().clone();
    let weights = pattern.coords().map(|(i, j)| 1.0 / (deg[i] * deg[j]).sqrt()).collect();
    View::new(pattern, weights, ViewKind::Adjacency)
}

/// Dense PPR matrix `alpha (I - (1 - alpha) D^{-1/2} (A + I) D^{-1/2})^{-1}`.
pub fn ppr_dense(graph: &Graph, alpha: f64, mode: PprMode, tol: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return arg(format!("alpha must lie in (0, 1], got {alpha}"));
    }
    let n = graph.n_nodes();
    let a_hat = normalized_adjacency(graph)?;
    match mode {
        PprMode::ClosedForm => {
            let mut m = Tensor::eye(n);
            for (k, (i, j)) in a_hat.pattern().coords().enumerate() {
                let v = m.get(i, j) - (1.0 - alpha) * a_hat.weights()[k];
                m.set(i, j, v);
            }
            let mut inv = invert(m)?;
            inv.data_mut().iter_mut().for_each(|x| *x *= alpha);
            Ok(inv)
        }
        PprMode::PowerIteration => {
            if !(tol > 0.0) {
                return arg(format!("tolerance must be positive, got {tol}"));
            }
            let mut s = Tensor::eye(n);
            s.data_mut().iter_mut().for_each(|x| *x *= alpha);
            let max_iter = 100_000;
            for _ in 0..max_iter {
                let mut next = Tensor::zeros(n, n);
                for i in 0..n {
                    let row = next.row_mut(i);
                    for k in a_hat.pattern().row_range(i) {
                        let w = (1.0 - alpha) * a_hat.weights()[k];
                        for (x, y) in row.iter_mut().zip(s.row(a_hat.pattern().col_idx()[k])) {
                            *x += w * y;
                        }
                    }
                    row[i] += alpha;
                }
                let change = next.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                s = next;
                if change < tol {
                    return Ok(s);
                }
            }
            Err(Error::Numerical(format!("power iteration did not reach tol {tol}")))
        }
    }
}

/// Full PPR diffusion view.
pub fn ppr_diffusion(graph: &Graph, alpha: f64, mode: PprMode, tol: f64) -> Result<View> {
    let s = ppr_dense(graph, alpha, mode, tol)?;
    View::from_dense(&clamp_nonnegative(s), ViewKind::Diffusion)
}

/// PPR diffusion keeping the `h` largest entries per row.
pub fn ppr_diffusion_top_h(graph: &Graph, alpha: f64, mode: PprMode, tol: f64, h: usize) -> Result<View> {
    ppr_diffusion(graph, alpha, mode, tol)?.top_h_per_row(h)
}

/// Round-off can leave entries at -1e-18; the exact matrix is nonnegative.
fn clamp_nonnegative(mut s: Tensor) -> Tensor {
    s.data_mut().iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
    s
}

/// Gauss-Jordan inversion with partial pivoting.
fn invert(mut m: Tensor) -> Result<Tensor> {
    let n = m.rows();
    let mut inv = Tensor::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m.get(a, col).abs().total_cmp(&m.get(b, col).abs())).expect("non-empty");
        let p = m.get(pivot, col);
        if p.abs() < 1e-300 {
            return Err(Error::Numerical(format!("singular system at column {col}")));
        }
        if pivot != col {
            for c in 0..n {
                let (a, b) = (m.get(col, c), m.get(pivot, c));
                m.set(col, c, b);
                m.set(pivot, c, a);
                let (a, b) = (inv.get(col, c), inv.get(pivot, c));
                inv.set(col, c, b);
                inv.set(pivot, c, a);
            }
        }
        let scale = 1.0 / p;
        m.row_mut(col).iter_mut().for_each(|x| *x *= scale);
        inv.row_mut(col).iter_mut().for_each(|x| *x *= scale);
        let prow = m.row(col).to_vec();
        let pinv = inv.row(col).to_vec();
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m.get(r, col);
            if f == 0.0 {
                continue;
            }
            for (x, y) in m.row_mut(r).iter_mut().zip(&prow) {
                *x -= f * y;
            }
            for (x, y) in inv.row_mut(r).iter_mut().zip(&pinv) {
                *x -= f * y;
            }
        }
    }
    Ok(inv)
}

fn unit_rows(features: &Tensor) -> Tensor {
    let mut out = features.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out
}

/// Undirected KNN pairs: `j` among the top-`k` cosine neighbours of `i` (self
/// excluded, ties to the smaller index) or vice versa.
pub fn knn_edges(features: &Tensor, k: usize) -> Result<Vec<(usize, usize)>> {
    let n = features.rows();
    if k == 0 {
        return arg("k must be positive");
    }
    if k >= n {
        return arg(format!("k = {k} must be smaller than the node count {n}"));
    }
    let unit = unit_rows(features);
    let sims = unit.matmul(&unit.transpose())?;
    let mut edges = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = sims.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        edges.extend(order[..k].iter().map(|&j| (i.min(j), i.max(j))));
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

pub fn knn_view(features: &Tensor, k: usize) -> Result<View> {
    let edges = knn_edges(features, k)?;
    View::from_undirected(features.rows(), &edges, ViewKind::Knn, false)
}

/// Keeps `keep_edges` undirected edges sampled uniformly without replacement.
pub fn subgraph_view(graph: &Graph, keep_edges: usize, seed: u64) -> Result<View> {
    let m = graph.n_edges();
    if keep_edges > m {
        return arg(format!("cannot keep {keep_edges} of {m} edges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, m, keep_edges).into_vec();
    idx.sort_unstable();
    let kept: Vec<(usize, usize)> = idx.into_iter().map(|k| graph.edges()[k]).collect();
    View::from_undirected(graph.n_nodes(), &kept, ViewKind::Subgraph, false)
}

/// Per-node candidate neighbour lists; each list sorted, unique and non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeSet {
    pattern: Arc<Pattern>,
}

impl ScopeSet {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        let pattern = Pattern::from_rows(n, rows)?;
        if let Some(i) = (0..n).find(|&i| pattern.row(i).is_empty()) {
            return arg(format!("scope of node {i} is empty"));
        }
        Ok(Self { pattern: Arc::new(pattern) })
    }

    pub fn full(n: usize) -> Self {
        Self::new(vec![(0..n).collect(); n]).expect("non-empty")
    }

    pub fn n(&self) -> usize {
        self.pattern.n_rows()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        self.pattern.row(i)
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn total(&self) -> usize {
        self.pattern.nnz()
    }
}

/// Nodes within `k` hops of each node (itself included) on the view's support.
pub fn scope_khop(view: &View, k: usize) -> Result<ScopeSet> {
    if !matches!(view.kind(), ViewKind::Adjacency | ViewKind::Knn | ViewKind::Subgraph) {
        return arg(format!("k-hop scopes need an adjacency, knn or subgraph view, got {:?}", view.kind()));
    }
    if k == 0 {
        return arg("k must be positive");
    }
    let n = view.n();
    let p = view.pattern();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let mut seen = vec![s];
        dist[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            if dist[u] == k {
                continue;
            }
            for &v in p.row(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    seen.push(v);
                    queue.push_back(v);
                }
            }
        }
        for &v in &seen {
            dist[v] = usize::MAX;
        }
        rows.push(seen);
    }
    ScopeSet::new(rows)
}

/// The `h` largest entries of each diffusion row (ties to the smaller index),
/// plus the node itself.
pub fn scope_toph(view: &View, h: usize) -> Result<ScopeSet> {
    if view.kind() != ViewKind::Diffusion {
        return arg(format!("top-h scopes need a diffusion view, got {:?}", view.kind()));
    }
    let n = view.n();
    if h == 0 {
        return arg("h must be positive");
    }
    if h > n {
        return arg(format!("h = {h} exceeds node count {n}"));
    }
    let p = view.pattern();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut positive: Vec<(usize, f64)> =
            p.row_range(i).map(|k| (p.col_idx()[k], view.weights()[k])).filter(|&(_, w)| w > 0.0).collect();
        positive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = positive.iter().take(h).map(|e| e.0).collect();
        if chosen.len() < h {
            // remaining slots go to zero-valued columns in index order
            let mut taken = chosen.clone();
            taken.sort_unstable();
            let mut j = 0;
            while chosen.len() < h {
                if taken.binary_search(&j).is_err() {
                    chosen.push(j);
                }
                j += 1;
            }
        }
        chosen.push(i);
        rows.push(chosen);
    }
    ScopeSet::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Splits;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        Graph::new(Tensor::zeros(n, 1), vec![0; n], &edges, Splits { train: vec![0], ..Default::default() }).unwrap()
    }

    #[test]
    fn adjacency_support() {
        let g = path(3);
        let v = adjacency_view(&g, false).unwrap();
        let coords: Vec<_> = v.pattern().coords().collect();
        assert_eq!(coords, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        let v = adjacency_view(&g, true).unwrap();
        assert_eq!(v.nnz(), 7);
        assert_eq!(v.get(1, 1), 1.0);
    }

    #[test]
    fn alpha_one_is_identity() {
        let g = path(5);
        for mode in [PprMode::ClosedForm, PprMode::PowerIteration] {
            let s = ppr_dense(&g, 1.0, mode, 1e-12).unwrap();
            assert_eq!(s, Tensor::eye(5));
        }
    }

    #[test]
    fn alpha_out_of_range() {
        let g = path(3);
        assert!(ppr_dense(&g, 0.0, PprMode::ClosedForm, 1e-12).is_err());
        assert!(ppr_dense(&g, 1.5, PprMode::ClosedForm, 1e-12).is_err());
    }

    #[test]
    fn knn_ties_pick_lowest_index() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 1), (0, 2)]);
        let v = knn_view(&x, 1).unwrap();
        assert!(v.is_symmetric_weights());
    }

    #[test]
    fn knn_orthogonal_rows_deterministic() {
        let x = Tensor::eye(4);
        // all similarities are 0: node 0 picks 1, everyone else picks 0
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 1), (0, 2), (0, 3)]);
        assert!(knn_edges(&x, 0).is_err());
        assert!(knn_edges(&x, 4).is_err());
    }

    #[test]
    fn zero_feature_rows_have_zero_similarity() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.1]]).unwrap();
        assert_eq!(knn_edges(&x, 1).unwrap(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn subgraph_extremes() {
        let g = path(6);
        let full = subgraph_view(&g, g.n_edges(), 3).unwrap();
        assert_eq!(full.pattern(), adjacency_view(&g, false).unwrap().pattern());
        assert_eq!(subgraph_view(&g, 0, 3).unwrap().nnz(), 0);
        assert!(subgraph_view(&g, 6, 3).is_err());
    }

    #[test]
    fn khop_on_path() {
        let g = path(4);
        let a = adjacency_view(&g, false).unwrap();
        assert_eq!(scope_khop(&a, 1).unwrap().get(1), &[0, 1, 2]);
        assert_eq!(scope_khop(&a, 2).unwrap().get(0), &[0, 1, 2]);
        assert!(scope_khop(&a, 0).is_err());
    }

    #[test]
    fn toph_extremes() {
        let g = path(5);
        let s = ppr_diffusion(&g, 1.0, PprMode::ClosedForm, 1e-12).unwrap();
        let sc = scope_toph(&s, 1).unwrap();
        for i in 0..5 {
            assert_eq!(sc.get(i), &[i]);
        }
        let s = ppr_diffusion(&g, 0.15, PprMode::ClosedForm, 1e-12).unwrap();
        let sc = scope_toph(&s, 5).unwrap();
        for i in 0..5 {
            assert_eq!(sc.get(i), &[0, 1, 2, 3, 4]);
        }
        assert!(scope_toph(&adjacency_view(&g, false).unwrap(), 2).is_err());
    }

    #[test]
    fn text_round_trip() {
        let g = path(4);
        let s = ppr_diffusion_top_h(&g, 0.15, PprMode::ClosedForm, 1e-12, 2).unwrap();
        let t = s.to_text();
        assert!(t.starts_with(&format!("4 {}\n", s.nnz())));
        assert_eq!(View::from_text(&t, ViewKind::Diffusion).unwrap(), s);
    }

    #[test]
    fn asymmetric_knn_rejected() {
        let p = Arc::new(Pattern::from_rows(2, vec![vec![1], vec![]]).unwrap());
        assert!(View::new(p.clone(), vec![1.0], ViewKind::Knn).is_err());
        assert!(View::new(p.clone(), vec![-1.0], ViewKind::Estimated).is_err());
        assert!(View::new(p, vec![1.0], ViewKind::Estimated).is_ok());
    }
}
