mod common;

use common::{ball_point, flat, reshape, rng, unit_rows};
use i2e_core::gradcheck::{central_difference, max_relative_error};
use i2e_core::hyperembed::{poincare_distance, poincare_distance_grad};
use i2e_core::trainer::{class_loss_unchecked, combine_grads, contrast_loss_unchecked};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn class_loss_gradients(seed in any::<u64>(), k in 1usize..=4, d in 2usize..=8, n in 2usize..=6) {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, k, d);
        let w = unit_rows(&mut r, n, d);
        let labels: Vec<usize> = (0..k).map(|_| r.random_range(0..n)).collect();
        let (m, t) = (r.random_range(0.0..0.3), r.random_range(0.1..1.0));
        let out = class_loss_unchecked(e.view(), &labels, w.view(), m, t).unwrap();
        let fe = central_difference(
            |x| class_loss_unchecked(reshape(x, &e).view(), &labels, w.view(), m, t).unwrap().loss,
            &flat(&e), H);
        prop_assert!(max_relative_error(&flat(&out.d_embeddings), &fe, FLOOR) < TOL);
        let fw = central_difference(
            |x| class_loss_unchecked(e.view(), &labels, reshape(x, &w).view(), m, t).unwrap().loss,
            &flat(&w), H);
        prop_assert!(max_relative_error(&flat(&out.d_weights), &fw, FLOOR) < TOL);
    }

    #[test]
    fn contrast_loss_gradients(seed in any::<u64>(), k in 1usize..=4, d in 2usize..=8) {
        let mut r = rng(seed);
        let i = unit_rows(&mut r, k, d);
        let t = unit_rows(&mut r, k, d);
        let tau = r.random_range(0.2..2.0);
        let out = contrast_loss_unchecked(i.view(), t.view(), tau).unwrap();
        let fi = central_difference(
            |x| contrast_loss_unchecked(reshape(x, &i).view(), t.view(), tau).unwrap().loss,
            &flat(&i), H);
        prop_assert!(max_relative_error(&flat(&out.d_images), &fi, FLOOR) < TOL);
        let ft = central_difference(
            |x| contrast_loss_unchecked(i.view(), reshape(x, &t).view(), tau).unwrap().loss,
            &flat(&t), H);
        prop_assert!(max_relative_error(&flat(&out.d_texts), &ft, FLOOR) < TOL);
        let ftau = central_difference(
            |x| contrast_loss_unchecked(i.view(), t.view(), x[0]).unwrap().loss, &[tau], H);
        prop_assert!(max_relative_error(&[out.d_tau], &ftau, FLOOR) < TOL);
    }

    #[test]
    fn combined_loss_gradient(seed in any::<u64>(), k in 1usize..=4, d in 2usize..=8, lambda in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let e = unit_rows(&mut r, k, d);
        let t = unit_rows(&mut r, k, d);
        let w = unit_rows(&mut r, 5, d);
        let labels: Vec<usize> = (0..k).map(|_| r.random_range(0..5)).collect();
        let f = |x: &[f64]| {
            let e = reshape(x, &e);
            let c = class_loss_unchecked(e.view(), &labels, w.view(), 0.15, 0.5).unwrap().loss;
            let s = contrast_loss_unchecked(e.view(), t.view(), 0.5).unwrap().loss;
            lambda * c + (1.0 - lambda) * s
        };
        let c = class_loss_unchecked(e.view(), &labels, w.view(), 0.15, 0.5).unwrap();
        let s = contrast_loss_unchecked(e.view(), t.view(), 0.5).unwrap();
        let analytic = combine_grads(lambda, &c.d_embeddings, &s.d_images);
        let numeric = central_difference(f, &flat(&e), H);
        prop_assert!(max_relative_error(&flat(&analytic), &numeric, FLOOR) < TOL);
    }

    #[test]
    fn poincare_gradients(seed in any::<u64>(), d in 2usize..=8) {
        let mut r = rng(seed);
        let u = ball_point(&mut r, d, 0.9);
        let v = ball_point(&mut r, d, 0.9);
        prop_assume!(u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 1e-4);
        let (dist, gu, gv) = poincare_distance_grad(&u, &v).unwrap();
        prop_assert!((dist - poincare_distance(&u, &v).unwrap()).abs() < 1e-12);
        let nu = central_difference(|x| poincare_distance(x, &v).unwrap(), &u, H);
        let nv = central_difference(|x| poincare_distance(&u, x).unwrap(), &v, H);
        prop_assert!(max_relative_error(&gu, &nu, FLOOR) < TOL);
        prop_assert!(max_relative_error(&gv, &nv, FLOOR) < TOL);
    }
}

/// With margin 0.15 and temperature 1/32 the logits are steep; the check
/// still holds at the default constants.
#[test]
fn class_loss_gradient_at_default_constants() {
    let mut r = rng(77);
    for _ in 0..20 {
        let e = unit_rows(&mut r, 3, 6);
        let w = unit_rows(&mut r, 4, 6);
        let labels = [0, 2, 3];
        let out = class_loss_unchecked(e.view(), &labels, w.view(), 0.15, 1.0 / 32.0).unwrap();
        let fe = central_difference(
            |x| {
                class_loss_unchecked(reshape(x, &e).view(), &labels, w.view(), 0.15, 1.0 / 32.0)
                    .unwrap()
                    .loss
            },
            &flat(&e),
            1e-7,
        );
        assert!(max_relative_error(&flat(&out.d_embeddings), &fe, FLOOR) < TOL);
    }
}
