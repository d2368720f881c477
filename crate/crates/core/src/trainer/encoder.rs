//! Two-layer perceptron towers with L2-normalized outputs.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `x ↦ normalize(W2 · tanh(W1 · x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept from the forward pass.
pub struct TowerCache {
    input: Array2<f64>,
    hidden: Array2<f64>,
    pre_norm: Array1<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct TowerGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Tower {
    /// Glorot-uniform weights, zero biases.
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
        };
        let w1 = glorot(d_hidden, d_in);
        let w2 = glorot(d_out, d_hidden);
        Tower {
            w1,
            b1: Array1::zeros(d_hidden),
            w2,
            b2: Array1::zeros(d_out),
        }
    }

    pub fn seeded(d_in: usize, d_hidden: usize, d_out: usize, seed: u64) -> Self {
        Self::init(d_in, d_hidden, d_out, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> TowerCache {
        let mut hidden = x.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut z = hidden.dot(&self.w2.t());
        z += &self.b2;
        let pre_norm = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
        let mut output = z;
        for (mut row, &n) in output.rows_mut().into_iter().zip(pre_norm.iter()) {
            row /= n;
        }
        TowerCache {
            input: x.to_owned(),
            hidden,
            pre_norm,
            output,
        }
    }

    /// Unit-norm embeddings for a batch of inputs.
    pub fn embed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).output
    }

    /// Backpropagates `d_out` (gradient w.r.t. the normalized outputs).
    pub fn backward(&self, cache: &TowerCache, d_out: &Array2<f64>) -> TowerGrads {
        // Through normalization: dz = (g - e <e, g>) / |z|.
        let e = &cache.output;
        let mut dz = d_out.clone();
        for ((mut g, er), &n) in dz
            .rows_mut()
            .into_iter()
            .zip(e.rows())
            .zip(cache.pre_norm.iter())
        {
            let proj = g.dot(&er);
            g.scaled_add(-proj, &er);
            g /= n;
        }
        let w2 = dz.t().dot(&cache.hidden);
        let b2 = dz.sum_axis(Axis(0));
        let mut da = dz.dot(&self.w2);
        da.zip_mut_with(&cache.hidden, |d, &h| *d *= 1.0 - h * h);
        let w1 = da.t().dot(&cache.input);
        let b1 = da.sum_axis(Axis(0));
        TowerGrads { w1, b1, w2, b2 }
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn slices(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        vec![
            (
                "w1",
                self.w1.shape().to_vec(),
                self.w1.iter().copied().collect(),
            ),
            ("b1", self.b1.shape().to_vec(), self.b1.to_vec()),
            (
                "w2",
                self.w2.shape().to_vec(),
                self.w2.iter().copied().collect(),
            ),
            ("b2", self.b2.shape().to_vec(), self.b2.to_vec()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn outputs_are_unit_norm() {
        let t = Tower::seeded(5, 7, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        for row in t.embed(x.view()).rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = Tower::seeded(4, 6, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let g = Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0..1.0));
        // Scalar objective: <g, f(x)>.
        let objective = |t: &Tower| (&t.embed(x.view()) * &g).sum();
        let grads = t.backward(&t.forward(x.view()), &g);
        let h = 1e-6;
        for i in 0..t.w1.len() {
            let mut p = t.clone();
            let mut m = t.clone();
            p.w1.as_slice_mut().unwrap()[i] += h;
            m.w1.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let an = grads.w1.as_slice().unwrap()[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "w1[{i}] {fd} vs {an}"
            );
        }
        for i in 0..t.b2.len() {
            let mut p = t.clone();
            let mut m = t.clone();
            p.b2[i] += h;
            m.b2[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grads.b2[i]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
        for i in 0..t.b1.len() {
            let mut p = t.clone();
            let mut m = t.clone();
            p.b1[i] += h;
            m.b1[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            assert!((fd - grads.b1[i]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
        for i in 0..t.w2.len() {
            let mut p = t.clone();
            let mut m = t.clone();
            p.w2.as_slice_mut().unwrap()[i] += h;
            m.w2.as_slice_mut().unwrap()[i] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let an = grads.w2.as_slice().unwrap()[i];
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }
}
