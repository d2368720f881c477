//! Class-set sampling for the margin softmax.

use std::collections::BTreeSet;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Returns `C' = C_batch ∪ C_random` as sorted class indices with
/// `|C'| = budget`, where `C_random` is drawn uniformly without replacement
/// from the classes not in the batch.
pub fn sample_classes(
    batch_labels: &[usize],
    num_classes: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let batch: BTreeSet<usize> = batch_labels.iter().copied().collect();
    if let Some(&bad) = batch.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside {num_classes} classes"
        )));
    }
    if budget < batch.len() {
        return Err(Error::invalid(format!(
            "class budget {budget} is smaller than the {} classes in the batch",
            batch.len()
        )));
    }
    if budget > num_classes {
        return Err(Error::invalid(format!(
            "class budget {budget} exceeds the {num_classes} available classes"
        )));
    }
    let extra = budget - batch.len();
    let mut out: Vec<usize> = batch.iter().copied().collect();
    if extra > 0 {
        let pool: Vec<usize> = (0..num_classes).filter(|c| !batch.contains(c)).collect();
        out.extend(
            index::sample(rng, pool.len(), extra)
                .into_iter()
                .map(|i| pool[i]),
        );
        out.sort_unstable();
    }
    Ok(out)
}
