use std::sync::Arc;

use cogsl::ndiff::{Tape, Tensor};
use proptest::prelude::*;

/// Symmetric cross-view InfoNCE written as plain nested loops.
fn naive(a: &Tensor, b: &Tensor, batch: &[usize], tau: f64) -> f64 {
    let cos = |i: usize, j: usize| {
        let (x, y) = (a.row(i), b.row(j));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
        dot / (nx * ny)
    };
    let n = batch.len();
    let mut total = 0.0;
    for &i in batch {
        let pos = (cos(i, i) / tau).exp();
        let mut row = 0.0;
        let mut col = 0.0;
        for &j in batch {
            row += (cos(i, j) / tau).exp();
            col += (cos(j, i) / tau).exp();
        }
        total += -(pos / row).ln() - (pos / col).ln();
    }
    total / (2.0 * n as f64)
}

fn loss(a: &Tensor, b: &Tensor, batch: &[usize], tau: f64) -> f64 {
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = t.infonce(va, vb, Arc::new(batch.to_vec()), tau).unwrap();
    t.value(l).item()
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_double_loop(a in matrix(8, 5), b in matrix(8, 5), tau in 0.1f64..2.0) {
        let batch: Vec<usize> = (0..8).collect();
        let (got, want) = (loss(&a, &b, &batch, tau), naive(&a, &b, &batch, tau));
        prop_assert!((got - want).abs() <= 1e-10, "{} vs {}", got, want);
    }

    #[test]
    fn sub_batches_match_double_loop(a in matrix(12, 4), b in matrix(12, 4), pick in prop::sample::subsequence((0..12).collect::<Vec<_>>(), 2..9)) {
        let (got, want) = (loss(&a, &b, &pick, 0.5), naive(&a, &b, &pick, 0.5));
        prop_assert!((got - want).abs() <= 1e-10);
    }
}

#[test]
fn identical_embeddings_give_log_batch() {
    for n in [2usize, 5, 8, 33] {
        let row = [0.3, -1.2, 0.7];
        let a = Tensor::new(n, 3, row.iter().copied().cycle().take(3 * n).collect()).unwrap();
        let batch: Vec<usize> = (0..n).collect();
        let l = loss(&a, &a, &batch, 0.5);
        assert!((l - (n as f64).ln()).abs() <= 1e-9, "n = {n}: {l}");
    }
}

#[test]
fn tiny_temperature_stays_finite() {
    let a = Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap();
    let b = Tensor::new(3, 2, vec![0.9, 0.1, 0.2, 1.0, -1.0, 0.4]).unwrap();
    let got = loss(&a, &b, &[0, 1, 2], 1e-3);
    assert!(got.is_finite());
}
