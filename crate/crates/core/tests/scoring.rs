use std::collections::BTreeMap;

use mocca_core::eval::roc_auc;
use mocca_core::objective::{quantile_index, update_radius, BoundaryMode, Hypersphere};
use mocca_core::scoring::{anomaly_score, frame_score, layer_distance, patch_score, Eq8Variant};
use proptest::prelude::*;

fn sphere(layer: usize, centroid: Vec<f32>, r2: f32) -> Hypersphere {
    Hypersphere::new(layer, centroid, r2, 0.1).unwrap()
}

proptest! {
    #[test]
    fn layer_distance_is_the_squared_euclidean_norm(
        pairs in prop::collection::vec((-4.0f32..4.0, -4.0f32..4.0), 1..32),
    ) {
        let (f, c): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let expect: f64 = f.iter().zip(&c).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
        let got = layer_distance(&f, &sphere(0, c, 0.0)).unwrap();
        prop_assert!((got - expect).abs() <= 1e-12 * (1.0 + expect));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn soft_scores_are_hard_scores_shifted_by_mean_radius(
        taus in prop::collection::vec(prop::collection::vec(0.0f64..50.0, 3), 2..40),
        radii in prop::collection::vec(0.0f32..5.0, 3),
    ) {
        let spheres: BTreeMap<usize, Hypersphere> =
            radii.iter().enumerate().map(|(j, &r)| (j, sphere(j, vec![0.0], r))).collect();
        let shift = radii.iter().map(|&r| r as f64).sum::<f64>() / 3.0;
        let mut hard = Vec::new();
        let mut soft = Vec::new();
        for t in &taus {
            let m: BTreeMap<usize, f64> = t.iter().copied().enumerate().collect();
            let h = anomaly_score(&m, &spheres, BoundaryMode::Hard).unwrap();
            let s = anomaly_score(&m, &spheres, BoundaryMode::Soft).unwrap();
            prop_assert!((h - shift - s).abs() < 1e-9);
            hard.push(h);
            soft.push(s);
        }
        let labels: Vec<u8> = (0..taus.len()).map(|i| (i % 2) as u8).collect();
        let (a, _) = roc_auc(&hard, &labels).unwrap();
        let (b, _) = roc_auc(&soft, &labels).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn radius_leaves_at_most_nu_outside(
        d in prop::collection::vec(0.0f32..100.0, 1..300),
        nu in 0.01f32..1.0,
    ) {
        let r = update_radius(&d, nu).unwrap();
        prop_assert!(d.contains(&r));
        let outside = d.iter().filter(|&&x| x > r).count();
        prop_assert!(outside as f64 <= nu as f64 * d.len() as f64 + 1e-6);
        let i = quantile_index(d.len(), nu);
        prop_assert!(i < d.len());
    }

    #[test]
    fn patch_score_is_the_largest_patch(g in prop::collection::vec(-10.0f64..10.0, 1..64)) {
        let s = patch_score(&g).unwrap();
        prop_assert!(g.contains(&s));
        prop_assert!(g.iter().all(|&x| x <= s));
    }

    #[test]
    fn frame_scores_stay_in_range(g in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let printed = frame_score(&g, Eq8Variant::Printed);
        let minmax = frame_score(&g, Eq8Variant::Minmax);
        prop_assert!((-1.0..=0.0).contains(&printed));
        prop_assert!((0.0..=1.0).contains(&minmax));
    }
}

#[test]
fn quantile_index_fixtures() {
    assert_eq!(quantile_index(10, 0.1), 8);
    assert_eq!(quantile_index(1000, 0.1), 899);
    assert_eq!(quantile_index(1, 0.5), 0);
    assert_eq!(quantile_index(7, 1.0), 0);
}

#[test]
fn mismatched_layers_are_rejected() {
    let spheres = BTreeMap::from([(1, sphere(1, vec![0.0], 0.0))]);
    let taus = BTreeMap::from([(2, 1.0)]);
    assert!(anomaly_score(&taus, &spheres, BoundaryMode::Hard).is_err());
    assert!(layer_distance(&[1.0, 2.0], &sphere(0, vec![0.0], 0.0)).is_err());
}
