//! Margin softmax over sampled classes, symmetric contrastive loss, and their
//! weighted combination, each with analytic gradients.
//!
//! Sign convention: all losses are negative log-likelihoods and are
//! minimized.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ClassLoss {
    /// Mean over the batch.
    pub loss: f64,
    /// Gradient w.r.t. each image embedding (K × D).
    pub d_embeddings: Array2<f64>,
    /// Gradient w.r.t. each sampled class row (|C'| × D).
    pub d_weights: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ContrastLoss {
    /// Sum of image→text and text→image cross-entropies over the batch.
    pub loss: f64,
    pub d_images: Array2<f64>,
    pub d_texts: Array2<f64>,
    pub d_tau: f64,
}

fn check_unit_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Large-margin cosine loss over the sampled class set `C'`.
///
/// `labels[k]` indexes the row of `weights` holding image `k`'s class; every
/// other row is a negative for it. Per example:
///
/// ```text
/// -log( e^{(s_y - m)/t} / (e^{(s_y - m)/t} + Σ_{c ≠ y} e^{s_c/t}) ),  s_c = <e, w_c>
/// ```
///
/// averaged over the batch.
pub fn class_loss(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    weights: ArrayView2<f64>,
    margin: f64,
    temperature: f64,
) -> Result<ClassLoss> {
    check_unit_rows(embeddings, "embedding")?;
    check_unit_rows(weights, "class weight")?;
    class_loss_unchecked(embeddings, labels, weights, margin, temperature)
}

/// [`class_loss`] without the unit-norm checks, for callers that perturb
/// inputs off the sphere (finite-difference checks).
pub fn class_loss_unchecked(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    weights: ArrayView2<f64>,
    margin: f64,
    temperature: f64,
) -> Result<ClassLoss> {
    let k = embeddings.nrows();
    if k == 0 || labels.len() != k {
        return Err(Error::invalid(format!(
            "batch of {k} embeddings with {} labels",
            labels.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("class temperature must be positive"));
    }
    if embeddings.ncols() != weights.ncols() {
        return Err(Error::invalid("embedding and class weight dims differ"));
    }
    let n = weights.nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::invalid(format!(
            "label {bad} not in sampled class set of {n}"
        )));
    }
    let sims = embeddings.dot(&weights.t());
    let mut loss = 0.0;
    let mut d_logits = Array2::<f64>::zeros((k, n));
    for (i, &y) in labels.iter().enumerate() {
        let row = sims.row(i);
        let logits: Vec<f64> = (0..n)
            .map(|c| {
                if c == y {
                    (row[c] - margin) / temperature
                } else {
                    row[c] / temperature
                }
            })
            .collect();
        let lse = log_sum_exp(logits.iter().copied());
        loss += lse - logits[y];
        for c in 0..n {
            let p = (logits[c] - lse).exp();
            d_logits[[i, c]] = (p - if c == y { 1.0 } else { 0.0 }) / temperature / k as f64;
        }
    }
    let d_embeddings = d_logits.dot(&weights);
    let d_weights = d_logits.t().dot(&embeddings);
    Ok(ClassLoss {
        loss: loss / k as f64,
        d_embeddings,
        d_weights,
    })
}

/// Symmetric in-batch contrastive loss with temperature `tau`:
/// `Σ_k -log softmax_j(<i_k, t_j>/τ)_k + Σ_k -log softmax_j(<i_j, t_k>/τ)_k`.
pub fn contrast_loss(
    images: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    tau: f64,
    tau_range: (f64, f64),
) -> Result<ContrastLoss> {
    if !(tau >= tau_range.0 && tau <= tau_range.1) {
        return Err(Error::invalid(format!(
            "tau {tau} outside [{}, {}]",
            tau_range.0, tau_range.1
        )));
    }
    check_unit_rows(images, "image embedding")?;
    check_unit_rows(texts, "text embedding")?;
    contrast_loss_unchecked(images, texts, tau)
}

/// [`contrast_loss`] without range or unit-norm checks.
pub fn contrast_loss_unchecked(
    images: ArrayView2<f64>,
    texts: ArrayView2<f64>,
    tau: f64,
) -> Result<ContrastLoss> {
    let k = images.nrows();
    if k == 0 {
        return Err(Error::invalid("contrastive batch is empty"));
    }
    if texts.nrows() != k || texts.ncols() != images.ncols() {
        return Err(Error::invalid("image and text batches differ in shape"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let sims = images.dot(&texts.t());
    let logits = &sims / tau;
    let mut loss = 0.0;
    // dL/dlogits = (row softmax - I) + (column softmax - I)
    let mut g = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[i];
        for j in 0..k {
            g[[i, j]] += (row[j] - lse).exp();
        }
        g[[i, i]] -= 1.0;
    }
    for j in 0..k {
        let col = logits.column(j);
        let lse = log_sum_exp(col.iter().copied());
        loss += lse - col[j];
        for i in 0..k {
            g[[i, j]] += (col[i] - lse).exp();
        }
        g[[j, j]] -= 1.0;
    }
    let d_images = g.dot(&texts) / tau;
    let d_texts = g.t().dot(&images) / tau;
    let d_tau = -(&g * &sims).sum() / (tau * tau);
    Ok(ContrastLoss {
        loss,
        d_images,
        d_texts,
        d_tau,
    })
}

/// `λ · class + (1 - λ) · contrast`; gradients are weighted the same way by
/// the caller using [`combine_grads`].
pub fn combined_loss(lambda: f64, class: f64, contrast: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * class + (1.0 - lambda) * contrast)
}

/// Weighted sum of two gradient arrays of equal shape.
pub fn combine_grads(lambda: f64, class: &Array2<f64>, contrast: &Array2<f64>) -> Array2<f64> {
    class * lambda + contrast * (1.0 - lambda)
}

/// Row-wise unit normalization.
pub fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

/// Euclidean norm of each row.
pub fn row_norms(m: ArrayView2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN_E_OVER_E_PLUS_1: f64 = 0.313_261_687_518_222_8;

    #[test]
    fn class_loss_simple_geometry() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let out = class_loss(e.view(), &[0], w.view(), 0.0, 1.0).unwrap();
        // -log(e / (e + 1))
        assert!((out.loss - LN_E_OVER_E_PLUS_1).abs() < 1e-12);
        assert!((out.loss - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn class_loss_default_constants() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let out = class_loss(e.view(), &[0], w.view(), 0.15, 1.0 / 32.0).unwrap();
        // Direct evaluation: positive logit (1 - 0.15) * 32 = 27.2, negative 0.
        let oracle = -(27.2f64.exp() / (27.2f64.exp() + 1.0)).ln();
        assert!((out.loss - oracle).abs() < 1e-6);
    }

    #[test]
    fn class_loss_symmetric_case() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let e = array![[s, s]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let out = class_loss(e.view(), &[1], w.view(), 0.0, 0.5).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_loss_errors() {
        let e = array![[1.0, 0.0]];
        let w = array![[1.0, 0.0]];
        assert!(class_loss(e.view(), &[1], w.view(), 0.0, 1.0).is_err());
        let bad = array![[2.0, 0.0]];
        assert!(class_loss(bad.view(), &[0], w.view(), 0.0, 1.0).is_err());
    }

    #[test]
    fn contrast_single_pair_is_zero() {
        let i = array![[0.6, 0.8]];
        let out = contrast_loss(i.view(), i.view(), 0.07, (1e-3, 10.0)).unwrap();
        assert!(out.loss.abs() < 1e-12);
    }

    #[test]
    fn contrast_aligned_pairs() {
        let i = array![[1.0, 0.0], [0.0, 1.0]];
        let out = contrast_loss(i.view(), i.view(), 1.0, (1e-3, 10.0)).unwrap();
        assert!((out.loss - 4.0 * LN_E_OVER_E_PLUS_1).abs() < 1e-12);
        assert!(contrast_loss(i.view(), i.view(), 20.0, (1e-3, 10.0)).is_err());
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(contrast_loss(empty.view(), empty.view(), 1.0, (1e-3, 10.0)).is_err());
    }

    #[test]
    fn contrast_is_permutation_invariant() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let i = array![[1.0, 0.0], [0.0, 1.0], [s, s]];
        let t = array![[s, s], [0.0, 1.0], [1.0, 0.0]];
        let a = contrast_loss(i.view(), t.view(), 0.5, (1e-3, 10.0))
            .unwrap()
            .loss;
        let ip = array![[s, s], [1.0, 0.0], [0.0, 1.0]];
        let tp = array![[1.0, 0.0], [s, s], [0.0, 1.0]];
        let b = contrast_loss(ip.view(), tp.view(), 0.5, (1e-3, 10.0))
            .unwrap()
            .loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn combined_arithmetic_and_endpoints() {
        assert_eq!(combined_loss(0.5, 2.0, 4.0).unwrap(), 3.0);
        assert_eq!(combined_loss(1.0, 2.5, 4.0).unwrap(), 2.5);
        assert_eq!(combined_loss(0.0, 2.5, 4.0).unwrap(), 4.0);
        assert!(combined_loss(1.5, 1.0, 1.0).is_err());
    }
}
