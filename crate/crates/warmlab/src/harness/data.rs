//! Seeded synthetic classification data.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;

use super::HarnessError;

/// A fixed synthetic classification set: one Gaussian centroid per class,
/// samples scattered around their centroid, labels assigned round-robin so
/// every class is equally represented.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// All samples, `[num_samples, input_dim]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Deterministically generate a dataset. Same arguments, same bytes.
pub fn gen_dataset(
    seed: u64,
    num_samples: usize,
    input_dim: usize,
    num_classes: usize,
    noise_level: f64,
) -> Result<Dataset, HarnessError> {
    if num_classes == 0 {
        return Err(HarnessError::InvalidConfig {
            field: "num_classes",
            reason: "must be at least 1".to_string(),
        });
    }
    if input_dim == 0 {
        return Err(HarnessError::InvalidConfig {
            field: "input_dim",
            reason: "must be at least 1".to_string(),
        });
    }
    if num_samples < num_classes {
        return Err(HarnessError::InvalidConfig {
            field: "num_samples",
            reason: format!("need at least one sample per class ({num_classes})"),
        });
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(HarnessError::InvalidConfig {
            field: "noise_level",
            reason: format!("must be non-negative and finite, got {noise_level}"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = Tensor::from_fn_2d(num_classes, input_dim, |_, _| rng.sample(StandardNormal));
    let labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    let inputs = Tensor::from_fn_2d(num_samples, input_dim, |row, col| {
        let z: f64 = rng.sample(StandardNormal);
        centroids.at2(labels[row], col) + noise_level * z
    });
    Ok(Dataset {
        inputs,
        labels,
        num_classes,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Gather `size` consecutive rows starting at `start`, cycling within
    /// the first `limit` rows (so a held-out tail is never touched).
    pub fn batch(&self, start: u64, size: usize, limit: usize) -> (Tensor, Vec<usize>) {
        debug_assert!(limit >= 1 && limit <= self.len());
        let rows: Vec<usize> = (0..size)
            .map(|k| ((start + k as u64) % limit as u64) as usize)
            .collect();
        let batch = Tensor::from_fn_2d(size, self.input_dim(), |k, col| {
            self.inputs.at2(rows[k], col)
        });
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (batch, labels)
    }

    /// The rows from `from` to the end, as one batch (the validation split).
    pub fn tail(&self, from: usize) -> (Tensor, Vec<usize>) {
        let count = self.len() - from;
        let dim = self.input_dim();
        let batch = Tensor::from_fn_2d(count, dim, |k, col| self.inputs.at2(from + k, col));
        let labels = self.labels[from..].to_vec();
        (batch, labels)
    }
}
