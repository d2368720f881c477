#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
    i2e_core::trainer::normalize_rows(&mut m);
    m
}

pub fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

pub fn reshape(x: &[f64], like: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_vec(like.raw_dim(), x.to_vec()).unwrap()
}

/// A point strictly inside the unit ball with norm below `r`.
pub fn ball_point(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let target = rng.random_range(0.0..r);
    v.iter().map(|x| x / n * target).collect()
}
