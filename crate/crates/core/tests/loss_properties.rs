mod common;

use common::{rng, unit_rows};
use i2e_core::trainer::{class_loss, contrast_loss, sample_classes};
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

/// Unsampled margin softmax, written out per example.
fn full_softmax_oracle(e: &Array2<f64>, labels: &[usize], w: &Array2<f64>, m: f64, t: f64) -> f64 {
    let mut total = 0.0;
    for (k, &y) in labels.iter().enumerate() {
        let pos = ((e.row(k).dot(&w.row(y)) - m) / t).exp();
        let neg: f64 = (0..w.nrows())
            .filter(|&c| c != y)
            .map(|c| (e.row(k).dot(&w.row(c)) / t).exp())
            .sum();
        total += -(pos / (pos + neg)).ln();
    }
    total / labels.len() as f64
}

proptest! {
    #[test]
    fn sampled_set_covering_all_classes_matches_full_softmax(seed in any::<u64>(), k in 1usize..=8, c in 2usize..=32) {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, k, 6);
        let w = unit_rows(&mut r, c, 6);
        let labels: Vec<usize> = (0..k).map(|_| r.random_range(0..c)).collect();
        let sampled = sample_classes(&labels, c, c, &mut r).unwrap();
        prop_assert_eq!(&sampled, &(0..c).collect::<Vec<_>>());
        let local: Vec<usize> = labels.iter().map(|y| sampled.binary_search(y).unwrap()).collect();
        let ws = w.select(Axis(0), &sampled);
        let got = class_loss(e.view(), &local, ws.view(), 0.15, 1.0 / 32.0).unwrap().loss;
        let want = full_softmax_oracle(&e, &labels, &w, 0.15, 1.0 / 32.0);
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
    }

    #[test]
    fn loss_non_decreasing_in_margin(seed in any::<u64>(), m1 in 0.0f64..0.5, dm in 0.0f64..0.5) {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, 1, 4);
        let mut w = unit_rows(&mut r, 5, 4);
        // Make class 0 the correct, best-scoring class.
        w.row_mut(0).assign(&e.row(0));
        let a = class_loss(e.view(), &[0], w.view(), m1, 0.25).unwrap().loss;
        let b = class_loss(e.view(), &[0], w.view(), m1 + dm, 0.25).unwrap().loss;
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn more_negatives_never_lower_the_loss(seed in any::<u64>(), n in 2usize..10) {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, 2, 5);
        let w = unit_rows(&mut r, n + 1, 5);
        let small = w.slice(ndarray::s![..n, ..]).to_owned();
        let a = class_loss(e.view(), &[0, 1], small.view(), 0.15, 0.1).unwrap().loss;
        let b = class_loss(e.view(), &[0, 1], w.view(), 0.15, 0.1).unwrap().loss;
        prop_assert!(b >= a);
    }

    #[test]
    fn sampled_set_contains_batch_and_has_budget_size(seed in any::<u64>(), c in 4usize..40) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..c)).collect();
        let budget = r.random_range(3..=c);
        let s = sample_classes(&labels, c, budget, &mut r).unwrap();
        prop_assert_eq!(s.len(), budget);
        prop_assert!(labels.iter().all(|l| s.contains(l)));
        prop_assert!(s.windows(2).all(|p| p[0] < p[1]));
    }
}

#[test]
fn tau_gradient_with_aligned_pairs() {
    let i = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for tau in [0.05, 0.3, 1.0, 4.0] {
        let out = contrast_loss(i.view(), i.view(), tau, (1e-3, 10.0)).unwrap();
        let h = 1e-6 * tau;
        let up = contrast_loss(i.view(), i.view(), tau + h, (1e-3, 10.0))
            .unwrap()
            .loss;
        let down = contrast_loss(i.view(), i.view(), tau - h, (1e-3, 10.0))
            .unwrap()
            .loss;
        let fd = (up - down) / (2.0 * h);
        assert!(
            (out.d_tau - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
            "tau={tau}"
        );
        // Sharper temperature makes perfectly aligned pairs more confident.
        assert!(out.d_tau > 0.0);
    }
}
