use mocca_core::eval::{max_balanced_accuracy, roc_auc, separation_gap};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn exhaustive_max_ba(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    thresholds
        .iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s >= t).count() as f64;
            let tn = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s < t).count() as f64;
            0.5 * (tp / pos + tn / neg)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..12).prop_map(|v| v as f64 * 0.25), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    })
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count((scores, labels) in labelled()) {
        let (auc, roc) = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert_eq!(roc.first().copied(), Some((0.0, 0.0)));
        prop_assert_eq!(roc.last().copied(), Some((1.0, 1.0)));
    }

    #[test]
    fn max_ba_matches_exhaustive_thresholds((scores, labels) in labelled()) {
        let (ba, _) = max_balanced_accuracy(&scores, &labels).unwrap();
        prop_assert!((ba - exhaustive_max_ba(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_transforms((scores, labels) in labelled()) {
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let (a, _) = roc_auc(&scores, &labels).unwrap();
        let (b, _) = roc_auc(&warped, &labels).unwrap();
        prop_assert_eq!(a, b);
        let (ba, _) = max_balanced_accuracy(&scores, &labels).unwrap();
        let (bb, _) = max_balanced_accuracy(&warped, &labels).unwrap();
        prop_assert_eq!(ba, bb);
    }

    #[test]
    fn separation_gap_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..40),
        b in prop::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let g = separation_gap(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
        prop_assert_eq!(g, separation_gap(&b, &a).unwrap());
        prop_assert_eq!(separation_gap(&a, &a).unwrap(), 0.0);
    }
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let mut labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let (auc, _) = roc_auc(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 0.02, "auc {auc}");
}

#[test]
fn single_class_is_an_error() {
    assert!(roc_auc(&[0.1, 0.2], &[0, 0]).is_err());
    assert!(max_balanced_accuracy(&[0.1, 0.2], &[1, 1]).is_err());
}
