use serde::{Deserialize, Serialize};

/// Mean, standard error and a normal 95% interval over a fixed-order sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
    pub ci95: (f64, f64),
}

impl StatSummary {
    /// Summarizes `values` in index order. A single value has zero standard
    /// error by convention.
    pub fn from_values(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self::exact(f64::NAN);
        }
        let mean = pairwise_sum(values) / count as f64;
        let std_error = if count > 1 {
            let sq: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&sq) / (count - 1) as f64 / count as f64).sqrt()
        } else {
            0.0
        };
        Self::new(mean, std_error, count)
    }

    pub fn new(mean: f64, std_error: f64, count: usize) -> Self {
        Self {
            mean,
            std_error,
            count,
            ci95: (mean - 1.96 * std_error, mean + 1.96 * std_error),
        }
    }

    /// A deterministic value wrapped as a summary with zero error.
    pub fn exact(value: f64) -> Self {
        Self::new(value, 0.0, 1)
    }
}

/// Pairwise summation in index order; the result depends only on the slice
/// contents, never on how they were produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}
