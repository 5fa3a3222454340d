//! Numerical kernel: distribution functions, running covariance,
//! symmetric pseudoinverse and least squares.

mod cov;
mod dist;
mod linalg;
pub mod special;

pub use cov::CovAccumulator;
pub use dist::{f_cdf, f_quantile, normal_cdf, normal_quantile, t_cdf};
pub use linalg::{ols, pinv, pinv_with_rank, OlsFit};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Sample mean; `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sum of squared deviations from the mean.
pub fn sum_sq_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Unbiased sample variance; `NaN` below two observations.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    sum_sq_dev(xs) / (xs.len() - 1) as f64
}
