mod common;

use std::collections::BTreeSet;

use cogsl::graph::load_dataset;
use cogsl::views::{adjacency_view, knn_edges, ppr_dense, ppr_diffusion, scope_khop, scope_toph, PprMode};
use proptest::prelude::*;

use common::{data_dir, random_graph};

#[test]
fn closed_form_ppr_matches_power_iteration() {
    for seed in 0..20 {
        let g = random_graph(50, 0.08, 3, 2, seed);
        let closed = ppr_dense(&g, 0.15, PprMode::ClosedForm, 0.0).unwrap();
        let power = ppr_dense(&g, 0.15, PprMode::PowerIteration, 1e-12).unwrap();
        let diff = closed.data().iter().zip(power.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-8, "seed {seed}: max abs diff {diff}");
    }
}

#[test]
fn teleport_one_is_identity() {
    let g = random_graph(30, 0.1, 2, 2, 4);
    for mode in [PprMode::ClosedForm, PprMode::PowerIteration] {
        let s = ppr_dense(&g, 1.0, mode, 1e-12).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 }, "{mode:?} ({i}, {j})");
            }
        }
    }
}

fn brute_knn(x: &cogsl::ndiff::Tensor, k: usize) -> BTreeSet<(usize, usize)> {
    let n = x.rows();
    let norm = |i: usize| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = BTreeSet::new();
    for i in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                (dot / (norm(i) * norm(j)), j)
            })
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in &sims[..k] {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out
}

#[test]
fn knn_matches_brute_force_on_wine() {
    let g = load_dataset(data_dir("wine")).unwrap();
    for k in [1, 5, 9] {
        let fast: BTreeSet<_> = knn_edges(g.features(), k).unwrap().into_iter().collect();
        assert_eq!(fast, brute_knn(g.features(), k), "k = {k}");
    }
}

/// Nodes reachable in at most `k` steps, by repeated frontier expansion over
/// the edge list.
fn reach(n: usize, edges: &[(usize, usize)], s: usize, k: usize) -> BTreeSet<usize> {
    let mut seen: BTreeSet<usize> = [s].into();
    for _ in 0..k {
        let mut next = seen.clone();
        for &(a, b) in edges {
            if seen.contains(&a) {
                next.insert(b);
            }
            if seen.contains(&b) {
                next.insert(a);
            }
        }
        seen = next;
    }
    assert!(seen.iter().all(|&v| v < n));
    seen
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn khop_scope_matches_reachability(seed in 0u64..10_000, n in 5usize..30, k in 1usize..4) {
        let g = random_graph(n, 0.15, 2, 2, seed);
        let scope = scope_khop(&adjacency_view(&g, false).unwrap(), k).unwrap();
        for i in 0..n {
            let got: BTreeSet<usize> = scope.get(i).iter().copied().collect();
            prop_assert_eq!(got, reach(n, g.edges(), i, k));
        }
    }

    #[test]
    fn toph_scope_matches_sorted_rows(seed in 0u64..10_000, n in 5usize..25, h in 1usize..6) {
        let g = random_graph(n, 0.2, 2, 2, seed);
        let view = ppr_diffusion(&g, 0.15, PprMode::ClosedForm, 0.0).unwrap();
        let dense = view.to_dense();
        let scope = scope_toph(&view, h).unwrap();
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dense.get(i, b).partial_cmp(&dense.get(i, a)).unwrap().then(a.cmp(&b)));
            let mut expect: BTreeSet<usize> = order[..h].iter().copied().collect();
            expect.insert(i);
            let got: BTreeSet<usize> = scope.get(i).iter().copied().collect();
            prop_assert_eq!(got, expect);
        }
    }
}
