use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::NumError;

/// Running mean and scatter matrix of a stream of `p`-dimensional points.
///
/// Only supports additions; the scatter is stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovAccumulator {
    count: u64,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(p: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; p],
            scatter: vec![0.0; p * p],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Welford update. The upper triangle is computed and mirrored so the
    /// scatter stays exactly symmetric.
    pub fn update(&mut self, x: &[f64]) -> Result<(), NumError> {
        let p = self.dim();
        if x.len() != p {
            return Err(NumError::DimensionMismatch {
                expected: p,
                found: x.len(),
            });
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let scale = (n - 1.0) / n;
        for i in 0..p {
            for j in i..p {
                let inc = scale * delta[i] * delta[j];
                self.scatter[i * p + j] += inc;
                if i != j {
                    self.scatter[j * p + i] += inc;
                }
            }
        }
        Ok(())
    }

    pub fn scatter(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_row_slice(p, p, &self.scatter)
    }

    /// Sample covariance `scatter / (count - 1)`; `None` until two points
    /// have been seen.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        if self.count < 2 {
            return None;
        }
        Some(self.scatter() / (self.count as f64 - 1.0))
    }
}
