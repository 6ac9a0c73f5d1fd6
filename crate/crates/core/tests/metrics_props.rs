//! Invariants of the evaluation metrics.

use proptest::prelude::*;
use subpop_lab::data::{degenerate_groups_to_classes, Dataset, Example, Prediction, Split};
use subpop_lab::metrics::{auroc, ece, evaluate};

fn labelled(n: usize, c: usize, a: usize, seed: u64) -> (Dataset, Vec<Prediction>) {
    let mut s = seed;
    let mut next = move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 33) as usize
    };
    let mut ex = Vec::new();
    let mut preds = Vec::new();
    for i in 0..n {
        let y = if i < c { i } else { next() % c };
        ex.push(Example::new(vec![0.0], y, next() % a));
        let mut p: Vec<f64> = (0..c).map(|_| (next() % 1000) as f64 + 1.0).collect();
        if next() % 3 != 0 {
            p[y] += 800.0;
        }
        let total: f64 = p.iter().sum();
        preds.push(Prediction::from_probs(p.iter().map(|v| v / total).collect()));
    }
    (Dataset::new(ex, c, a, 1, Split::Test).unwrap(), preds)
}

proptest! {
    #[test]
    fn orderings_between_summaries(n in 10usize..150, c in 2usize..4, a in 1usize..4, seed in any::<u64>()) {
        let (data, preds) = labelled(n, c, a, seed);
        let r = evaluate(&preds, &data).unwrap();
        prop_assert!(r.worst_group_acc <= r.adjusted_acc + 1e-15);
        prop_assert!(r.worst_class_acc <= r.balanced_acc + 1e-15);
        prop_assert!(r.worst_precision <= r.avg_precision + 1e-15);
        prop_assert!(r.worst_f1 <= r.avg_f1 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.ece));
        let per_group_max = r.per_group_acc.iter().flatten().copied().fold(0.0, f64::max);
        prop_assert!(r.adjusted_acc <= per_group_max + 1e-15);
    }

    #[test]
    fn degenerate_groups_turn_group_metrics_into_class_metrics(n in 10usize..150, c in 2usize..4, seed in any::<u64>()) {
        let (data, preds) = labelled(n, c, 3, seed);
        let r = evaluate(&preds, &degenerate_groups_to_classes(&data)).unwrap();
        prop_assert!((r.worst_group_acc - r.worst_class_acc).abs() < 1e-15);
        prop_assert!((r.adjusted_acc - r.balanced_acc).abs() < 1e-15);
    }

    #[test]
    fn auroc_flips_under_negated_scores(scores in prop::collection::vec(0u8..20, 4..100)) {
        let positives: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auroc(&s, &positives).unwrap() + auroc(&neg, &positives).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn confident_wrong_predictions_have_large_ece() {
    let probs = vec![vec![0.99, 0.01]; 100];
    let labels = vec![1; 100];
    assert!((ece(&probs, &labels, 10).unwrap() - 0.99).abs() < 1e-12);
}
