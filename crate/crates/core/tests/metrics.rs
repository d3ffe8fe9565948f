use cogsl::metrics::{auc_ovr_macro, evaluate, f1_macro, f1_micro, roc_auc};
use cogsl::ndiff::Tensor;
use proptest::prelude::*;

fn fixed_case() -> (Tensor, Vec<(usize, usize)>) {
    let probs = Tensor::new(
        6,
        3,
        vec![
            0.6, 0.3, 0.1, //
            0.2, 0.5, 0.3, //
            0.1, 0.7, 0.2, //
            0.3, 0.4, 0.3, //
            0.1, 0.2, 0.7, //
            0.5, 0.1, 0.4,
        ],
    )
    .unwrap();
    let targets = vec![(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)];
    (probs, targets)
}

#[test]
fn six_sample_three_class_case() {
    let (probs, targets) = fixed_case();
    let m = evaluate(&probs, &targets).unwrap();
    // predictions 0 1 1 1 2 0: per-class F1 1/2, 4/5, 2/3
    assert_eq!(m.f1_micro, 4.0 / 6.0);
    assert_eq!(m.accuracy, 4.0 / 6.0);
    assert!((m.f1_macro - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() <= 1e-15);
    // winning positive/negative pairs per class: 6/8, 7/8, 8/8
    assert_eq!(m.auc, (0.75 + 0.875 + 1.0) / 3.0);
}

/// Fraction of (positive, negative) pairs ranked correctly, ties worth half.
fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &p) in positive.iter().enumerate() {
        for (j, &q) in positive.iter().enumerate() {
            if p && !q {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(data in prop::collection::vec((0u8..5, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 4.0).collect();
        let positive: Vec<bool> = data.iter().map(|d| d.1).collect();
        match (roc_auc(&scores, &positive), pair_count_auc(&scores, &positive)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn micro_f1_is_accuracy(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        prop_assert!((f1_micro(&truth, &pred) - acc).abs() <= 1e-15);
        let macro_f1 = f1_macro(&truth, &pred, 4);
        prop_assert!((0.0..=1.0).contains(&macro_f1));
    }
}

#[test]
fn perfect_probabilities_score_one() {
    let probs = Tensor::new(4, 2, vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.4, 0.6]).unwrap();
    assert_eq!(auc_ovr_macro(&probs, &[0, 1, 0, 1]), 1.0);
}
