#![allow(dead_code)]

use std::path::PathBuf;

use cogsl::graph::{Graph, Splits};
use cogsl::ndiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

/// Erdős–Rényi graph with edge probability `p`, random features and labels.
pub fn random_graph(n: usize, p: f64, d: usize, classes: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let x = Tensor::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let train: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
    let val: Vec<usize> = (0..n).filter(|i| i % 3 == 1).collect();
    let test: Vec<usize> = (0..n).filter(|i| i % 3 == 2).collect();
    Graph::new(x, labels, &edges, Splits { train, val, test }).unwrap()
}

/// Breadth-first component labels.
pub fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut label = vec![usize::MAX; n];
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = s;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = s;
                    stack.push(v);
                }
            }
        }
    }
    label
}
